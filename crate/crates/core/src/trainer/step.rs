//! Loss and gradient of one training batch.

use std::ops::Range;

use ndarray::Array2;
use rayon::prelude::*;

use crate::encoder::{
    backward_sequence, check_ids, forward_sequence, mlm_logits_backward, mlm_logits_rows,
    EncoderParams, SequenceCache,
};
use crate::error::Result;
use crate::labels::LabelMatrices;
use crate::objectives::{
    combined_stage2_loss, nll_sum_with_grad, pep_loss_with_grad, LossTerm, PepConfig, PepLoss,
    TreeBatchItem,
};

/// Sequences per gradient-accumulation chunk. Fixed so the reduction order
/// does not depend on the number of threads.
const CHUNK: usize = 8;

/// One sequence of a batch as fed to the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSequence {
    /// Input ids after corruption.
    pub ids: Vec<u32>,
    /// Masked positions and their original ids.
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// A whole tree inside a batch: the sequences it owns and its labels.
#[derive(Debug, Clone)]
pub struct BatchTree<'a> {
    pub sequences: Range<usize>,
    pub labels: &'a LabelMatrices,
}

#[derive(Debug, Clone, Default)]
pub struct StepBatch<'a> {
    pub sequences: Vec<BatchSequence>,
    pub trees: Vec<BatchTree<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub mlm: LossTerm,
    pub pep: PepLoss,
    pub total: f64,
}

/// Computes the batch objective and, optionally, its gradient.
/// The masked-token part is the mean over every masked position of the batch;
/// the relation part is computed on the trees' `[CLS]` rows.
pub fn objective(
    params: &EncoderParams,
    batch: &StepBatch<'_>,
    pep: &PepConfig,
    want_grad: bool,
) -> Result<(StepLosses, Option<EncoderParams>)> {
    for seq in &batch.sequences {
        check_ids(&seq.ids, params)?;
    }
    let forward: Vec<(Array2<f64>, SequenceCache)> = batch
        .sequences
        .par_iter()
        .map(|s| forward_sequence(&s.ids, params))
        .collect();

    let masked: usize = if pep.mlm { batch.sequences.iter().map(|s| s.positions.len()).sum() } else { 0 };
    let mut mlm_grads: Vec<Option<Array2<f64>>> = vec![None; batch.sequences.len()];
    let mut mlm_sum = 0.0;
    if masked > 0 {
        let parts: Vec<(f64, Array2<f64>)> = batch
            .sequences
            .par_iter()
            .zip(forward.par_iter())
            .map(|(s, (hidden, _))| {
                if s.positions.is_empty() {
                    return (0.0, Array2::zeros((0, 0)));
                }
                let logits = mlm_logits_rows(hidden, &s.positions, params);
                nll_sum_with_grad(logits.view(), &s.targets)
            })
            .collect();
        for (i, (sum, dlogits)) in parts.into_iter().enumerate() {
            mlm_sum += sum;
            if !batch.sequences[i].positions.is_empty() {
                mlm_grads[i] = Some(dlogits / masked as f64);
            }
        }
    }
    let mlm = if masked > 0 { LossTerm { value: mlm_sum / masked as f64, active: true } } else { LossTerm::INACTIVE };

    let mut grads = want_grad.then(|| params.zeros_like());
    let mut pep_loss = PepLoss::default();
    let mut tree_dh: Vec<Array2<f64>> = Vec::new();
    if !pep.pep_disabled() && !batch.trees.is_empty() {
        let embeddings: Vec<Array2<f64>> = batch
            .trees
            .iter()
            .map(|t| {
                let mut h = Array2::zeros((t.sequences.len(), params.config.hidden_dim));
                for (row, s) in t.sequences.clone().enumerate() {
                    h.row_mut(row).assign(&forward[s].0.row(0));
                }
                h
            })
            .collect();
        let items: Vec<TreeBatchItem<'_>> = batch
            .trees
            .iter()
            .zip(&embeddings)
            .map(|(t, h)| TreeBatchItem { embeddings: h.view(), labels: t.labels })
            .collect();
        let (loss, dh) = pep_loss_with_grad(&items, params, pep, grads.as_mut())?;
        pep_loss = loss;
        tree_dh = dh;
    }
    let total = if pep.mlm { combined_stage2_loss(mlm, &pep_loss) } else { pep_loss.total };
    let losses = StepLosses { mlm, pep: pep_loss, total };

    let Some(mut grads) = grads else { return Ok((losses, None)) };

    // gradient w.r.t. every sequence's final hidden states
    let mut d_hidden: Vec<Array2<f64>> = forward.iter().map(|(h, _)| Array2::zeros(h.raw_dim())).collect();
    for (t, dh) in batch.trees.iter().zip(&tree_dh) {
        for (row, s) in t.sequences.clone().enumerate() {
            let mut r = d_hidden[s].row_mut(0);
            r += &dh.row(row);
        }
    }
    let chunk_grads: Vec<EncoderParams> = (0..batch.sequences.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            for &i in chunk {
                let mut dh = d_hidden[i].clone();
                if let Some(dlogits) = &mlm_grads[i] {
                    let s = &batch.sequences[i];
                    dh += &mlm_logits_backward(dlogits, &forward[i].0, &s.positions, params, &mut g);
                }
                if dh.iter().any(|&v| v != 0.0) {
                    backward_sequence(&dh, &forward[i].1, params, &mut g);
                }
            }
            g
        })
        .collect();
    for g in &chunk_grads {
        grads.add_assign(g);
    }
    Ok((losses, Some(grads)))
}

/// Objective value only.
pub fn objective_value(params: &EncoderParams, batch: &StepBatch<'_>, pep: &PepConfig) -> Result<StepLosses> {
    objective(params, batch, pep, false).map(|(l, _)| l)
}
