//! Downstream claim classification on frozen encoder features.

mod fewshot;
mod gcn;
mod metrics;
mod probe;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fewshot::{
    curve_table, few_shot_run, holdout_split, stratified_sample, FewShotConfig, FewShotCurve, FewShotPoint, LabeledSet, RunRecord,
};
pub use gcn::{gcn_classify, normalized_adjacency, GcnConfig, GcnFit, GcnModel, GraphSample};
pub use metrics::{auc, average_ranks, confusion_matrix, evaluate, spearman, ClassMetrics, Metrics};
pub use probe::{argmax_rows, train_probe, LinearProbe, ProbeConfig};

use crate::encoder::{embed_posts, EncoderParams};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

pub fn pool_rows(h: &Array2<f64>, pooling: Pooling) -> Array1<f64> {
    match pooling {
        Pooling::Mean => h.mean_axis(Axis(0)).expect("non-empty matrix"),
        Pooling::Max => h.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v)),
    }
}

/// Pooled `[CLS]` embedding of one claim's posts.
pub fn claim_embedding(posts: &[TokenSequence], params: &EncoderParams, pooling: Pooling) -> Result<Array1<f64>> {
    if posts.is_empty() {
        return Err(Error::EmptyInput("claim posts"));
    }
    Ok(pool_rows(&embed_posts(posts, params)?, pooling))
}

/// One pooled row per claim, computed in parallel across claims.
pub fn claim_embeddings(claims: &[Vec<TokenSequence>], params: &EncoderParams, pooling: Pooling) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> =
        claims.par_iter().map(|posts| claim_embedding(posts, params, pooling)).collect::<Result<_>>()?;
    let mut out = Array2::zeros((claims.len(), params.config.hidden_dim));
    for (mut row, r) in out.outer_iter_mut().zip(&rows) {
        row.assign(r);
    }
    Ok(out)
}
