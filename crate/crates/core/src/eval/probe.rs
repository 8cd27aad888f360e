//! Multinomial logistic regression on frozen features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Coefficient of the `l2 / 2 * |W|^2` penalty; the bias is not penalized.
    pub l2: f64,
    /// Stop once the loss changes by less than this between iterations.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Center and scale features with training statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-2, tolerance: 1e-6, max_iterations: 20_000, standardize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// `d x classes`, acting on standardized features.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub iterations: usize,
    pub loss: f64,
    pub converged: bool,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn standardized(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.standardized(x).dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Checks labels and returns the single class when only one is present.
pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("training labels"));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Shape(format!("class {bad} outside 0..{num_classes}")));
    }
    if labels.iter().all(|&c| c == labels[0]) {
        return Err(Error::SingleClass(labels[0]));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` and its gradient with respect to
/// the logits (already divided by the number of rows).
pub(crate) fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for ((mut row, logit), &y) in grad.outer_iter_mut().zip(logits.outer_iter()).zip(labels) {
        let max = logit.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() + max - logit[y];
        row /= sum;
        row[y] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

fn objective(x: &Array2<f64>, labels: &[usize], w: &Array2<f64>, b: &Array1<f64>, l2: f64) -> (f64, Array2<f64>, Array1<f64>) {
    let logits = x.dot(w) + b;
    let (loss, dlogits) = softmax_xent(&logits, labels);
    let dw = x.t().dot(&dlogits) + &(w * l2);
    let db = dlogits.sum_axis(Axis(0));
    (loss + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>(), dw, db)
}

/// Fits the probe by full-batch gradient descent with a backtracking step
/// size, starting from zero weights.
pub fn train_probe(x: ArrayView2<'_, f64>, labels: &[usize], num_classes: usize, config: &ProbeConfig) -> Result<LinearProbe> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", x.nrows(), labels.len())));
    }
    check_labels(labels, num_classes)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite feature".into()));
    }
    let d = x.ncols();
    let (mean, scale) = if config.standardize {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        (mean, scale)
    } else {
        (Array1::zeros(d), Array1::ones(d))
    };
    let xs = (&x - &mean) / &scale;

    let mut w = Array2::zeros((d, num_classes));
    let mut b = Array1::zeros(num_classes);
    let (mut loss, mut dw, mut db) = objective(&xs, labels, &w, &b, config.l2);
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let grad_sq = dw.iter().chain(db.iter()).map(|g| g * g).sum::<f64>();
        if grad_sq == 0.0 {
            converged = true;
            break;
        }
        step *= 2.0;
        let (nw, nb, next) = loop {
            let nw = &w - &(&dw * step);
            let nb = &b - &(&db * step);
            let next = objective(&xs, labels, &nw, &nb, config.l2);
            if next.0 <= loss - 0.5 * step * grad_sq || step < 1e-12 {
                break (nw, nb, next);
            }
            step *= 0.5;
        };
        let change = loss - next.0;
        w = nw;
        b = nb;
        (loss, dw, db) = next;
        if change.abs() < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(LinearProbe { mean, scale, weights: w, bias: b, iterations, loss, converged })
}
