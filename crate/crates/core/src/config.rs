//! Run configuration read from and written to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{FewShotConfig, Pooling, ProbeConfig};
use crate::objectives::PepConfig;
use crate::text::MAX_POSITIONS;
use crate::trainer::{AdamWConfig, TrainingSchedule};

/// Encoder shape; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub task_proj_dim: usize,
    pub project_pairs: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        Self {
            layers: d.layers,
            heads: d.heads,
            hidden_dim: d.hidden_dim,
            ffn_dim: d.ffn_dim,
            max_positions: MAX_POSITIONS,
            task_proj_dim: d.task_proj_dim,
            project_pairs: d.project_pairs,
            init_std: d.init_std,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            vocab_size,
            task_proj_dim: self.task_proj_dim,
            project_pairs: self.project_pairs,
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub conversations: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pooling: Pooling,
    /// Report accuracy; otherwise macro F1.
    pub balanced: bool,
    /// Fraction of labeled claims held out for testing.
    pub test_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pooling: Pooling::Mean, balanced: true, test_fraction: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub pep: PepConfig,
    pub schedule: TrainingSchedule,
    pub optimizer: AdamWConfig,
    pub probe: ProbeConfig,
    pub fewshot: FewShotConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            vocab_size: crate::text::DEFAULT_VOCAB_SIZE,
            model: ModelConfig::default(),
            pep: PepConfig::default(),
            schedule: TrainingSchedule::default(),
            optimizer: AdamWConfig::default(),
            probe: ProbeConfig::default(),
            fewshot: FewShotConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the top-level seed into every seeded section and checks
    /// value ranges.
    pub fn resolve(mut self) -> Result<Self> {
        self.schedule.seed = self.seed;
        self.fewshot.seed = self.seed;
        self.fewshot.probe = self.probe;
        self.fewshot.balanced = self.eval.balanced;
        self.schedule.validate()?;
        self.pep.validate()?;
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return Err(Error::Config("eval.test_fraction must lie in [0, 1)".into()));
        }
        Ok(self)
    }
}
