//! A two-layer graph convolution classifier over conversation trees.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::{argmax_rows, check_labels, softmax_xent};
use crate::error::{Error, Result};

/// Node features of one tree plus its undirected edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub features: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl GraphSample {
    /// Builds a sample from node features and a parent list.
    pub fn from_parents(features: Array2<f64>, parents: &[Option<usize>]) -> Self {
        let edges = parents.iter().enumerate().filter_map(|(i, p)| p.map(|p| (p, i))).collect();
        Self { features, edges }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self { hidden: 16, learning_rate: 0.01, l2: 1e-4, max_epochs: 500, tolerance: 1e-6, seed: 0 }
    }
}

/// `D^-1/2 (A + I) D^-1/2` for an undirected graph.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in edges {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let degree: Array1<f64> = a.sum_axis(Axis(1));
    for ((i, j), v) in a.indexed_iter_mut() {
        *v /= (degree[i] * degree[j]).sqrt();
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

struct GraphCache {
    ax: Array2<f64>,
    a1: Array2<f64>,
    ah1: Array2<f64>,
    a2: Array2<f64>,
    readout: Array1<f64>,
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl GcnModel {
    pub fn init(features: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: glorot(features, hidden, &mut rng),
            b1: Array1::zeros(hidden),
            w2: glorot(hidden, hidden, &mut rng),
            b2: Array1::zeros(hidden),
            wo: glorot(hidden, classes, &mut rng),
            bo: Array1::zeros(classes),
        }
    }

    fn forward_cached(&self, adj: &Array2<f64>, x: &Array2<f64>) -> GraphCache {
        let ax = adj.dot(x);
        let a1 = ax.dot(&self.w1) + &self.b1;
        let ah1 = adj.dot(&relu(&a1));
        let a2 = ah1.dot(&self.w2) + &self.b2;
        let readout = relu(&a2).mean_axis(Axis(0)).expect("non-empty graph");
        GraphCache { ax, a1, ah1, a2, readout }
    }

    /// Class logits of one graph.
    pub fn logits(&self, graph: &GraphSample) -> Array1<f64> {
        let adj = normalized_adjacency(graph.features.nrows(), &graph.edges);
        let cache = self.forward_cached(&adj, &graph.features);
        cache.readout.dot(&self.wo) + &self.bo
    }

    pub fn predict(&self, graphs: &[GraphSample]) -> Vec<usize> {
        graphs.iter().map(|g| argmax_rows(&self.logits(g).insert_axis(Axis(0)))[0]).collect()
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
            wo: Array2::zeros(self.wo.raw_dim()),
            bo: Array1::zeros(self.bo.len()),
        }
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.bo.as_slice_mut().unwrap(),
        ]
    }
}

/// Training summary.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnFit {
    pub model: GcnModel,
    pub epochs: usize,
    pub loss: f64,
}

/// Trains the classifier with full-batch Adam on softmax cross-entropy.
pub fn gcn_classify(graphs: &[GraphSample], labels: &[usize], num_classes: usize, config: &GcnConfig) -> Result<GcnFit> {
    if graphs.len() != labels.len() {
        return Err(Error::Shape(format!("{} graphs for {} labels", graphs.len(), labels.len())));
    }
    check_labels(labels, num_classes)?;
    let features = graphs[0].features.ncols();
    for g in graphs {
        if g.features.nrows() == 0 || g.features.ncols() != features {
            return Err(Error::Shape("graphs need at least one node and equal feature widths".into()));
        }
        if g.edges.iter().any(|&(i, j)| i.max(j) >= g.features.nrows()) {
            return Err(Error::Shape("edge endpoint outside the graph".into()));
        }
    }
    let adjs: Vec<Array2<f64>> = graphs.iter().map(|g| normalized_adjacency(g.features.nrows(), &g.edges)).collect();
    let mut model = GcnModel::init(features, config.hidden, num_classes, config.seed);
    let mut m = model.zeros_like();
    let mut v = model.zeros_like();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut previous = f64::INFINITY;
    let mut loss = f64::INFINITY;
    let mut epochs = 0;
    while epochs < config.max_epochs {
        epochs += 1;
        let caches: Vec<GraphCache> = graphs.iter().zip(&adjs).map(|(g, a)| model.forward_cached(a, &g.features)).collect();
        let mut readouts = Array2::zeros((graphs.len(), config.hidden));
        for (mut row, c) in readouts.outer_iter_mut().zip(&caches) {
            row.assign(&c.readout);
        }
        let logits = readouts.dot(&model.wo) + &model.bo;
        let (xent, dlogits) = softmax_xent(&logits, labels);
        let penalty: f64 = [&model.w1, &model.w2, &model.wo].iter().flat_map(|w| w.iter()).map(|x| x * x).sum();
        loss = xent + 0.5 * config.l2 * penalty;

        let mut grad = model.zeros_like();
        grad.wo = readouts.t().dot(&dlogits) + &(&model.wo * config.l2);
        grad.bo = dlogits.sum_axis(Axis(0));
        let dreadout = dlogits.dot(&model.wo.t());
        for (k, (c, adj)) in caches.iter().zip(&adjs).enumerate() {
            let n = c.a2.nrows() as f64;
            let mut da2 = Array2::from_shape_fn(c.a2.raw_dim(), |(_, j)| dreadout[[k, j]] / n);
            da2.zip_mut_with(&c.a2, |d, &a| if a <= 0.0 { *d = 0.0 });
            grad.w2 += &c.ah1.t().dot(&da2);
            grad.b2 += &da2.sum_axis(Axis(0));
            let mut da1 = adj.dot(&da2.dot(&model.w2.t()));
            da1.zip_mut_with(&c.a1, |d, &a| if a <= 0.0 { *d = 0.0 });
            grad.w1 += &c.ax.t().dot(&da1);
            grad.b1 += &da1.sum_axis(Axis(0));
        }
        grad.w1 += &(&model.w1 * config.l2);
        grad.w2 += &(&model.w2 * config.l2);

        let bc1 = 1.0 - f64::powi(beta1, epochs as i32);
        let bc2 = 1.0 - f64::powi(beta2, epochs as i32);
        for (((p, g), m), v) in model.slices_mut().into_iter().zip(grad.slices_mut()).zip(m.slices_mut()).zip(v.slices_mut()) {
            for (((p, g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        if (previous - loss).abs() < config.tolerance {
            break;
        }
        previous = loss;
    }
    Ok(GcnFit { model, epochs, loss })
}
