use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::MAX_POSITIONS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub task_proj_dim: usize,
    /// Apply a per-task linear projection before the pairwise product.
    /// When off, pairwise logits are the bare `H Hᵀ`.
    pub project_pairs: bool,
    pub init_std: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 2 layers, 2 heads, d = 64, ffn = 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden_dim: 64,
            ffn_dim: 256,
            max_positions: MAX_POSITIONS,
            vocab_size,
            task_proj_dim: 64,
            project_pairs: true,
            init_std: 0.02,
        }
    }

    /// BERT-base dimensions with a 52k vocabulary.
    pub fn bert_base() -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            max_positions: MAX_POSITIONS,
            vocab_size: 52_000,
            task_proj_dim: 768,
            project_pairs: true,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
            ("task_proj_dim", self.task_proj_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: Array1<f64>,
    pub attn_norm_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ffn_norm_gain: Array1<f64>,
    pub ffn_norm_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Encoder weights. Matrices map row vectors: `y = x W + b`.
/// The same struct doubles as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Array1<f64>,
    pub final_norm_bias: Array1<f64>,
    pub mlm_bias: Array1<f64>,
    /// One `d × task_proj_dim` projection per pretraining task (root, branch, parent).
    pub task_projection: [Array2<f64>; 3],
}

impl EncoderParams {
    /// All-zero parameters (also the empty gradient buffer).
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let v = config.vocab_size;
        let layer = || LayerParams {
            attn_norm_gain: Array1::zeros(d),
            attn_norm_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ffn_norm_gain: Array1::zeros(d),
            ffn_norm_bias: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        };
        let proj = || Array2::zeros((d, config.task_proj_dim));
        Self {
            config: config.clone(),
            token_embedding: Array2::zeros((v, d)),
            position_embedding: Array2::zeros((config.max_positions, d)),
            layers: (0..config.layers).map(|_| layer()).collect(),
            final_norm_gain: Array1::zeros(d),
            final_norm_bias: Array1::zeros(d),
            mlm_bias: Array1::zeros(v),
            task_projection: [proj(), proj(), proj()],
        }
    }

    /// Random initialization: weights ~ N(0, init_std²), norm gains 1, biases 0.
    /// Task projections use std `1/sqrt(d·k)` so initial pair logits are O(1).
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let fill = |a: &mut Array2<f64>, dist: &Normal<f64>, rng: &mut R| {
            a.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(&mut p.token_embedding, &normal, rng);
        fill(&mut p.position_embedding, &normal, rng);
        for layer in &mut p.layers {
            layer.attn_norm_gain.fill(1.0);
            layer.ffn_norm_gain.fill(1.0);
            for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
                fill(w, &normal, rng);
            }
        }
        p.final_norm_gain.fill(1.0);
        let proj_std = 1.0 / ((config.hidden_dim * config.task_proj_dim) as f64).sqrt();
        let proj_normal = Normal::new(0.0, proj_std).expect("positive std");
        for proj in &mut p.task_projection {
            fill(proj, &proj_normal, rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named parameter blocks in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("embeddings.token".into(), self.token_embedding.view().into_dyn()),
            ("embeddings.position".into(), self.position_embedding.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let blocks: [(&str, ArrayViewD<'_, f64>); 16] = [
                ("attn_norm.gain", l.attn_norm_gain.view().into_dyn()),
                ("attn_norm.bias", l.attn_norm_bias.view().into_dyn()),
                ("attn.wq", l.wq.view().into_dyn()),
                ("attn.bq", l.bq.view().into_dyn()),
                ("attn.wk", l.wk.view().into_dyn()),
                ("attn.bk", l.bk.view().into_dyn()),
                ("attn.wv", l.wv.view().into_dyn()),
                ("attn.bv", l.bv.view().into_dyn()),
                ("attn.wo", l.wo.view().into_dyn()),
                ("attn.bo", l.bo.view().into_dyn()),
                ("ffn_norm.gain", l.ffn_norm_gain.view().into_dyn()),
                ("ffn_norm.bias", l.ffn_norm_bias.view().into_dyn()),
                ("ffn.w1", l.w1.view().into_dyn()),
                ("ffn.b1", l.b1.view().into_dyn()),
                ("ffn.w2", l.w2.view().into_dyn()),
                ("ffn.b2", l.b2.view().into_dyn()),
            ];
            out.extend(blocks.into_iter().map(|(n, v)| (format!("layer{i}.{n}"), v)));
        }
        out.push(("final_norm.gain".into(), self.final_norm_gain.view().into_dyn()));
        out.push(("final_norm.bias".into(), self.final_norm_bias.view().into_dyn()));
        out.push(("mlm.bias".into(), self.mlm_bias.view().into_dyn()));
        for (t, name) in ["rop", "brp", "pap"].iter().enumerate() {
            out.push((format!("task.{name}.projection"), self.task_projection[t].view().into_dyn()));
        }
        out
    }

    /// Mutable views in the same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = vec![
            ("embeddings.token".into(), self.token_embedding.view_mut().into_dyn()),
            ("embeddings.position".into(), self.position_embedding.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let blocks: [(&str, ArrayViewMutD<'_, f64>); 16] = [
                ("attn_norm.gain", l.attn_norm_gain.view_mut().into_dyn()),
                ("attn_norm.bias", l.attn_norm_bias.view_mut().into_dyn()),
                ("attn.wq", l.wq.view_mut().into_dyn()),
                ("attn.bq", l.bq.view_mut().into_dyn()),
                ("attn.wk", l.wk.view_mut().into_dyn()),
                ("attn.bk", l.bk.view_mut().into_dyn()),
                ("attn.wv", l.wv.view_mut().into_dyn()),
                ("attn.bv", l.bv.view_mut().into_dyn()),
                ("attn.wo", l.wo.view_mut().into_dyn()),
                ("attn.bo", l.bo.view_mut().into_dyn()),
                ("ffn_norm.gain", l.ffn_norm_gain.view_mut().into_dyn()),
                ("ffn_norm.bias", l.ffn_norm_bias.view_mut().into_dyn()),
                ("ffn.w1", l.w1.view_mut().into_dyn()),
                ("ffn.b1", l.b1.view_mut().into_dyn()),
                ("ffn.w2", l.w2.view_mut().into_dyn()),
                ("ffn.b2", l.b2.view_mut().into_dyn()),
            ];
            out.extend(blocks.into_iter().map(|(n, v)| (format!("layer{i}.{n}"), v)));
        }
        out.push(("final_norm.gain".into(), self.final_norm_gain.view_mut().into_dyn()));
        out.push(("final_norm.bias".into(), self.final_norm_bias.view_mut().into_dyn()));
        out.push(("mlm.bias".into(), self.mlm_bias.view_mut().into_dyn()));
        let [rop, brp, pap] = &mut self.task_projection;
        out.push(("task.rop.projection".into(), rop.view_mut().into_dyn()));
        out.push(("task.brp.projection".into(), brp.view_mut().into_dyn()));
        out.push(("task.pap.projection".into(), pap.view_mut().into_dyn()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, block by block.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Flat copy of every parameter in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
    }

    /// Mutable access to the `index`-th scalar in flattened order.
    pub fn with_scalar_mut<T>(&mut self, mut index: usize, f: impl FnOnce(&mut f64) -> T) -> T {
        for (_, mut t) in self.tensors_mut() {
            if index < t.len() {
                let x = t.iter_mut().nth(index).expect("index within block");
                return f(x);
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }
}
