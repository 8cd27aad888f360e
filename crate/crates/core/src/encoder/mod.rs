//! Compact bidirectional transformer encoder: per-post `[CLS]` embeddings,
//! tied-weight masked-token logits and per-task pairwise relation logits.

mod checkpoint;
mod model;
mod params;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainingState, CHECKPOINT_VERSION,
};
pub use model::{
    backward_sequence, forward_sequence, mlm_logits_backward, mlm_logits_rows, pair_embeddings,
    pairwise_backward, SequenceCache,
};
pub use params::{EncoderConfig, EncoderParams, LayerParams};

use crate::error::{Error, Result};
use crate::labels::Task;
use crate::text::TokenSequence;

/// Output of a batch forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Final hidden states per sequence over its unpadded prefix.
    pub hidden: Vec<Array2<f64>>,
    /// `[CLS]` embedding (row 0 of each hidden state), one row per sequence.
    pub cls: Array2<f64>,
}

pub(crate) fn check_ids(ids: &[u32], params: &EncoderParams) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::Shape("empty sequence".into()));
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::Shape(format!(
            "sequence of {} ids exceeds {} positions",
            ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Runs a padded batch (all rows the same length). Trailing `[PAD]` runs are
/// excluded from attention.
pub fn forward(batch: &[Vec<u32>], params: &EncoderParams) -> Result<EncoderOutput> {
    let width = batch.first().map_or(0, Vec::len);
    if batch.iter().any(|row| row.len() != width) {
        return Err(Error::Shape("batch rows have different lengths".into()));
    }
    let trimmed: Vec<&[u32]> = batch
        .iter()
        .map(|row| &row[..TokenSequence::unpadded_len(row)])
        .collect();
    for ids in &trimmed {
        check_ids(ids, params)?;
    }
    let hidden: Vec<Array2<f64>> =
        trimmed.par_iter().map(|ids| forward_sequence(ids, params).0).collect();
    let d = params.config.hidden_dim;
    let mut cls = Array2::zeros((batch.len(), d));
    for (i, h) in hidden.iter().enumerate() {
        cls.row_mut(i).assign(&h.row(0));
    }
    Ok(EncoderOutput { hidden, cls })
}

/// `[CLS]` embeddings of encoded posts, one row each (the matrix `H` of a tree).
pub fn embed_posts(posts: &[TokenSequence], params: &EncoderParams) -> Result<Array2<f64>> {
    for p in posts {
        check_ids(p.ids(), params)?;
    }
    let rows: Vec<Array2<f64>> = posts
        .par_iter()
        .map(|p| forward_sequence(p.ids(), params).0)
        .collect();
    let mut h = Array2::zeros((posts.len(), params.config.hidden_dim));
    for (i, hidden) in rows.iter().enumerate() {
        h.row_mut(i).assign(&hidden.row(0));
    }
    Ok(h)
}

/// Vocabulary logits at the given positions of one sequence's hidden states.
pub fn mlm_logits(hidden: &Array2<f64>, params: &EncoderParams, positions: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = positions.iter().find(|&&p| p >= hidden.nrows()) {
        return Err(Error::Shape(format!(
            "masked position {bad} outside sequence of length {}",
            hidden.nrows()
        )));
    }
    if positions.is_empty() {
        return Ok(Array2::zeros((0, params.config.vocab_size)));
    }
    Ok(mlm_logits_rows(hidden, positions, params))
}

/// Pairwise relation logits `S = (H P)(H P)ᵀ` for one task; symmetric by construction.
pub fn pairwise_logits(h: ArrayView2<'_, f64>, params: &EncoderParams, task: Task) -> Array2<f64> {
    let z = pair_embeddings(h, params, task.index());
    let mut s = z.dot(&z.t());
    // make exact symmetry independent of the matmul kernel
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            s[[j, i]] = s[[i, j]];
        }
    }
    s
}

/// Mean of the rows of `h`.
pub fn mean_rows(h: &Array2<f64>) -> ndarray::Array1<f64> {
    h.mean_axis(Axis(0)).expect("non-empty matrix")
}
