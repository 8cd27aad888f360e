use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    /// Linear decay from the peak to zero at the final step.
    #[default]
    Linear,
    /// Hold the peak after warmup.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub steps: usize,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub decay: Decay,
}

impl StageSchedule {
    pub fn validate(&self, stage: u8) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("stage {stage}: warmup_fraction must lie in [0, 1]")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("stage {stage}: batch_size must be at least 1")));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("stage {stage}: peak_lr must be finite and non-negative")));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    /// Learning rate for 1-based `step`: linear ramp from 0 to the peak over
    /// the warmup span, then linear decay to 0 at the last step (or constant).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step <= warmup && warmup > 0 {
            return self.peak_lr * step as f64 / warmup as f64;
        }
        match self.decay {
            Decay::Constant => self.peak_lr,
            Decay::Linear => {
                let span = self.steps.saturating_sub(warmup);
                if span == 0 {
                    return self.peak_lr;
                }
                let left = self.steps.saturating_sub(step);
                self.peak_lr * left as f64 / span as f64
            }
        }
    }
}

/// Stage tables must be given in full when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Trees with more posts are cut down to a random connected subtree.
    pub max_tree_posts: usize,
}

fn default_max_posts() -> usize {
    crate::conversation::DEFAULT_MAX_POSTS
}

impl Default for TrainingSchedule {
    /// Desk-scale defaults: 2,000 stage-1 and 1,000 stage-2 steps.
    fn default() -> Self {
        Self {
            stage1: StageSchedule {
                steps: 2_000,
                warmup_fraction: 0.1,
                peak_lr: 4e-4,
                batch_size: 64,
                decay: Decay::Linear,
            },
            stage2: StageSchedule {
                steps: 1_000,
                warmup_fraction: 0.1,
                peak_lr: 5e-5,
                batch_size: 8,
                decay: Decay::Linear,
            },
            seed: 0,
            checkpoint_every: 0,
            max_tree_posts: default_max_posts(),
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate(1)?;
        self.stage2.validate(2)?;
        if self.max_tree_posts == 0 {
            return Err(Error::Config("max_tree_posts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stage(&self, stage: u8) -> &StageSchedule {
        if stage == 1 {
            &self.stage1
        } else {
            &self.stage2
        }
    }
}
