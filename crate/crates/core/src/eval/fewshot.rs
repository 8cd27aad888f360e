//! Repeated few-shot probe training over a grid of labeled-sample counts.

use std::fmt::Write;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, ClassMetrics};
use super::probe::{train_probe, ProbeConfig};
use crate::error::{Error, Result};
use crate::trainer::derive_seed;

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    /// Total labeled claims per run, drawn stratified by class.
    pub ks: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Report accuracy (balanced classes) rather than macro F1.
    pub balanced: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { ks: (1..=14).map(|i| i * 10).collect(), repetitions: 5, seed: 0, probe: ProbeConfig::default(), balanced: true }
    }
}

impl FewShotConfig {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.ks.is_empty() {
            return Err(Error::Config("no k values given".into()));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k == 0 || k > pool) {
            return Err(Error::Config(format!("k = {k} outside 1..={pool} (training pool size)")));
        }
        Ok(())
    }
}

/// One probe run, as written to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub init: String,
    pub k: usize,
    pub repetition: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub k: usize,
    /// Mean and sample standard deviation of the primary metric.
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotCurve {
    pub points: Vec<FewShotPoint>,
    pub records: Vec<RunRecord>,
}

/// Draws `k` indices with per-class counts proportional to class frequency
/// (largest remainder), giving every present class at least one draw when
/// `k` allows. Result is sorted.
pub fn stratified_sample(labels: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let n = labels.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|m| k as f64 * m.len() as f64 / n).collect();
    let mut quota: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = k - quota.iter().sum::<usize>();
    for &c in order.iter().cycle().take(classes * 2) {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    // every present class gets one draw, taken from the largest quota
    let present = by_class.iter().filter(|m| !m.is_empty()).count();
    if k >= present {
        for c in 0..classes {
            if quota[c] == 0 && !by_class[c].is_empty() {
                let donor = (0..classes).max_by_key(|&d| (quota[d], std::cmp::Reverse(d))).expect("some class");
                quota[donor] -= 1;
                quota[c] = 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(k);
    for (members, &q) in by_class.iter().zip(&quota) {
        picked.extend(index::sample(&mut rng, members.len(), q).into_iter().map(|i| members[i]));
    }
    picked.sort_unstable();
    picked
}

/// Splits row indices into a training pool and a stratified held-out test
/// set holding `test_fraction` of the rows (rounded, at least one).
pub fn holdout_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let k = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = stratified_sample(labels, k.min(n), seed);
    let mut is_test = vec![false; n];
    for &i in &test {
        is_test[i] = true;
    }
    ((0..n).filter(|&i| !is_test[i]).collect(), test)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For each k, trains `repetitions` probes on stratified k-subsets of `pool`
/// and scores them on `test`.
pub fn few_shot_run(
    pool: &LabeledSet,
    test: &LabeledSet,
    num_classes: usize,
    config: &FewShotConfig,
    dataset: &str,
    init: &str,
) -> Result<FewShotCurve> {
    config.validate(pool.len())?;
    if test.is_empty() {
        return Err(Error::EmptyInput("few-shot test set"));
    }
    let mut points = Vec::with_capacity(config.ks.len());
    let mut records = Vec::new();
    for &k in &config.ks {
        let mut scores = Vec::with_capacity(config.repetitions);
        for rep in 0..config.repetitions {
            let rows = stratified_sample(&pool.labels, k, derive_seed(config.seed, k as u64, rep as u64));
            let train = pool.subset(&rows);
            let probe = train_probe(train.features.view(), &train.labels, num_classes, &config.probe)?;
            let metrics = evaluate(&probe.predict(test.features.view()), &test.labels, num_classes, config.balanced)?;
            scores.push(metrics.primary);
            records.push(RunRecord {
                dataset: dataset.to_owned(),
                init: init.to_owned(),
                k,
                repetition: rep,
                accuracy: metrics.accuracy,
                macro_f1: metrics.macro_f1,
                per_class: metrics.per_class,
            });
        }
        let (mean, std) = mean_std(&scores);
        points.push(FewShotPoint { k, mean, std });
    }
    Ok(FewShotCurve { points, records })
}

/// Tab-separated `k mean std` table with a header line.
pub fn curve_table(points: &[FewShotPoint]) -> String {
    let mut out = String::from("k\tmean\tstd\n");
    for p in points {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}", p.k, p.mean, p.std);
    }
    out
}
