//! Token masking, the masked-token loss, the three pairwise relation losses
//! and their weighted combination.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{pairwise_backward, pairwise_logits, EncoderParams};
use crate::error::{Error, Result};
use crate::labels::{LabelMatrices, RelationMatrix, Task};
use crate::text::{TokenSequence, MASK_ID, NUM_SPECIAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PepConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mlm: bool,
    pub rop: bool,
    pub brp: bool,
    pub pap: bool,
    pub mask_rate: f64,
    /// Weight on positive pairs in the relation losses; `None` = unweighted.
    pub positive_weight: Option<f64>,
}

impl Default for PepConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            mlm: true,
            rop: true,
            brp: true,
            pap: true,
            mask_rate: 0.15,
            positive_weight: None,
        }
    }
}

impl PepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mlm || self.rop || self.brp || self.pap) {
            return Err(Error::Config("at least one of mlm/rop/brp/pap must be enabled".into()));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config("mask_rate must lie in (0, 1)".into()));
        }
        if let Some(w) = self.positive_weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config("positive_weight must be finite and positive".into()));
            }
        }
        Ok(())
    }

    /// No relation task enabled.
    pub fn pep_disabled(&self) -> bool {
        !(self.rop || self.brp || self.pap)
    }

    pub fn enabled(&self, task: Task) -> bool {
        match task {
            Task::Root => self.rop,
            Task::Branch => self.brp,
            Task::Parent => self.pap,
        }
    }

    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::Root => self.alpha,
            Task::Branch => self.beta,
            Task::Parent => self.gamma,
        }
    }
}

/// How selected positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingScheme {
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingScheme {
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    fn default() -> Self {
        Self { mask_prob: 0.8, random_prob: 0.1 }
    }
}

impl MaskingScheme {
    pub fn always_mask() -> Self {
        Self { mask_prob: 1.0, random_prob: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingOutcome {
    pub corrupted: Vec<u32>,
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

/// Selects each non-special position with probability `rate` and corrupts
/// the selection per `scheme`. `None` when the sequence has no maskable token.
pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    scheme: MaskingScheme,
    rng: &mut R,
) -> Option<MaskingOutcome> {
    let ids = seq.ids();
    if !ids.iter().any(|&id| id >= NUM_SPECIAL) {
        return None;
    }
    let mut corrupted = ids.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if id < NUM_SPECIAL || rng.random::<f64>() >= rate {
            continue;
        }
        positions.push(pos);
        targets.push(id);
        let roll: f64 = rng.random();
        if roll < scheme.mask_prob {
            corrupted[pos] = MASK_ID;
        } else if roll < scheme.mask_prob + scheme.random_prob && vocab_size as u32 > NUM_SPECIAL {
            corrupted[pos] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    Some(MaskingOutcome { corrupted, positions, targets })
}

/// A loss value with a flag telling whether anything was supervised.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerm {
    pub value: f64,
    pub active: bool,
}

impl LossTerm {
    pub const INACTIVE: LossTerm = LossTerm { value: 0.0, active: false };
}

/// Summed negative log-likelihood of `targets` and its gradient w.r.t. the logits.
pub(crate) fn nll_sum_with_grad(logits: ArrayView2<'_, f64>, targets: &[u32]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[t as usize];
        for (gv, &v) in g.iter_mut().zip(row.iter()) {
            *gv = (v - log_z).exp();
        }
        g[t as usize] -= 1.0;
    }
    (total, grad)
}

/// Mean negative log-likelihood over masked positions; inactive when none.
pub fn mlm_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<LossTerm> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.ncols()) {
        return Err(Error::Shape(format!("target {t} outside {} classes", logits.ncols())));
    }
    if targets.is_empty() {
        return Ok(LossTerm::INACTIVE);
    }
    let (sum, _) = nll_sum_with_grad(logits.view(), targets);
    Ok(LossTerm { value: sum / targets.len() as f64, active: true })
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `σ(logit)` against `label`, with its derivative.
fn bce_with_grad(logit: f64, label: bool, positive_weight: f64) -> (f64, f64) {
    if label {
        // -ln σ(s) = softplus(-s)
        (positive_weight * softplus(-logit), positive_weight * (sigmoid(logit) - 1.0))
    } else {
        // -ln(1 - σ(s)) = softplus(s)
        (softplus(logit), sigmoid(logit))
    }
}

/// Mean binary cross-entropy over supervised entries, plus dLoss/dLogits.
pub fn pep_task_loss_with_grad(
    logits: &Array2<f64>,
    labels: &RelationMatrix,
    mask: &[bool],
    positive_weight: Option<f64>,
) -> Result<(LossTerm, Array2<f64>)> {
    let n = labels.n();
    if logits.dim() != (n, n) || mask.len() != n * n {
        return Err(Error::Shape(format!(
            "pair logits {:?} vs {n}×{n} labels and mask of {}",
            logits.dim(),
            mask.len()
        )));
    }
    let mut grad = Array2::zeros((n, n));
    let count = mask.iter().filter(|&&m| m).count();
    if n < 2 || count == 0 {
        return Ok((LossTerm::INACTIVE, grad));
    }
    let w = positive_weight.unwrap_or(1.0);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !mask[i * n + j] {
                continue;
            }
            let (l, g) = bce_with_grad(logits[[i, j]], labels.get(i, j), w);
            total += l;
            grad[[i, j]] = g / count as f64;
        }
    }
    Ok((LossTerm { value: total / count as f64, active: true }, grad))
}

pub fn pep_task_loss(logits: &Array2<f64>, labels: &RelationMatrix, mask: &[bool]) -> Result<LossTerm> {
    pep_task_loss_with_grad(logits, labels, mask, None).map(|(l, _)| l)
}

/// Per-task relation losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PepLoss {
    pub rop: f64,
    pub brp: f64,
    pub pap: f64,
    pub total: f64,
}

impl PepLoss {
    pub fn task(&self, task: Task) -> f64 {
        match task {
            Task::Root => self.rop,
            Task::Branch => self.brp,
            Task::Parent => self.pap,
        }
    }

    fn set(&mut self, task: Task, v: f64) {
        match task {
            Task::Root => self.rop = v,
            Task::Branch => self.brp = v,
            Task::Parent => self.pap = v,
        }
    }
}

/// One tree's embedding matrix `H` with its labels.
pub struct TreeBatchItem<'a> {
    pub embeddings: ArrayView2<'a, f64>,
    pub labels: &'a LabelMatrices,
}

/// Relation losses over a batch of trees: each task is averaged over the
/// trees that have at least one supervised pair, then weighted by α/β/γ.
/// When `grads` is given, projection gradients are accumulated there and the
/// gradient w.r.t. each tree's `H` is returned.
pub fn pep_loss_with_grad(
    trees: &[TreeBatchItem<'_>],
    params: &EncoderParams,
    config: &PepConfig,
    mut grads: Option<&mut EncoderParams>,
) -> Result<(PepLoss, Vec<Array2<f64>>)> {
    let mut loss = PepLoss::default();
    let mut dh: Vec<Array2<f64>> =
        trees.iter().map(|t| Array2::zeros(t.embeddings.raw_dim())).collect();
    let active_trees = trees.iter().filter(|t| t.labels.n() >= 2).count();
    if active_trees == 0 {
        return Ok((loss, dh));
    }
    for task in Task::ALL {
        if !config.enabled(task) {
            continue;
        }
        let mut sum = 0.0;
        for (tree, dh_tree) in trees.iter().zip(dh.iter_mut()) {
            if tree.labels.n() < 2 {
                continue;
            }
            let logits = pairwise_logits(tree.embeddings, params, task);
            let (term, dlogits) = pep_task_loss_with_grad(
                &logits,
                tree.labels.task(task),
                &tree.labels.mask,
                config.positive_weight,
            )?;
            sum += term.value;
            if let Some(g) = grads.as_deref_mut() {
                let scale = config.weight(task) / active_trees as f64;
                if scale != 0.0 {
                    let ds = dlogits * scale;
                    *dh_tree += &pairwise_backward(&ds, tree.embeddings, params, task.index(), g);
                }
            }
        }
        loss.set(task, sum / active_trees as f64);
    }
    loss.total = Task::ALL.iter().map(|&t| config.weight(t) * loss.task(t)).sum();
    Ok((loss, dh))
}

pub fn pep_loss(trees: &[TreeBatchItem<'_>], params: &EncoderParams, config: &PepConfig) -> Result<PepLoss> {
    pep_loss_with_grad(trees, params, config, None).map(|(l, _)| l)
}

/// Stage-2 objective: unweighted sum of the masked-token and relation parts.
pub fn combined_stage2_loss(mlm: LossTerm, pep: &PepLoss) -> f64 {
    mlm.value + pep.total
}
