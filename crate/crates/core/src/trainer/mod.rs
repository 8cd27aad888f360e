//! Two-stage pretraining: masked-token training on a post corpus, then
//! masked-token plus relation training on whole conversation trees.

mod optim;
mod schedule;
mod step;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{AdamW, AdamWConfig};
pub use schedule::{Decay, StageSchedule, TrainingSchedule};
pub use step::{objective, objective_value, BatchSequence, BatchTree, StepBatch, StepLosses};

use crate::conversation::ClaimConversation;
use crate::encoder::{save_checkpoint, Checkpoint, EncoderParams, TrainingState};
use crate::error::{Error, Result};
use crate::labels::{derive_all, LabelMatrices};
use crate::objectives::{mask_tokens, MaskingScheme, PepConfig};
use crate::text::{encode_post, TokenSequence, Vocabulary};

const STREAM_BATCH: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;

/// Mixes a run seed with a stream tag and a step into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A conversation ready for stage 2: encoded posts and derived labels.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    pub id: String,
    pub posts: Vec<TokenSequence>,
    pub labels: LabelMatrices,
}

impl PreparedTree {
    pub fn new(conv: &ClaimConversation, vocab: &Vocabulary) -> Self {
        Self {
            id: conv.id.clone(),
            posts: conv.texts().map(|t| encode_post(t, vocab)).collect(),
            labels: derive_all(conv),
        }
    }
}

/// Encodes conversations and derives their labels, cutting trees larger
/// than `max_posts` down to a seeded random connected subtree.
pub fn prepare_trees(
    conversations: &[ClaimConversation],
    vocab: &Vocabulary,
    max_posts: usize,
    seed: u64,
) -> Vec<PreparedTree> {
    conversations
        .iter()
        .enumerate()
        .map(|(i, conv)| {
            if conv.len() > max_posts {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SUBSAMPLE, i as u64));
                PreparedTree::new(&conv.subsample(max_posts, &mut rng), vocab)
            } else {
                PreparedTree::new(conv, vocab)
            }
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub mlm_loss: f64,
    pub rop_loss: f64,
    pub brp_loss: f64,
    pub pap_loss: f64,
    pub total: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "step\tstage\tlr\tmlm_loss\trop_loss\tbrp_loss\tpap_loss\ttotal";
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:e}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.stage, self.lr, self.mlm_loss, self.rop_loss, self.brp_loss, self.pap_loss, self.total
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub optimizer: AdamWConfig,
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint when it belongs to the stage being run.
    pub resume: Option<Checkpoint>,
    pub masking: Option<MaskingScheme>,
    /// Halt after this step as if interrupted; the learning-rate schedule
    /// still follows the full stage length.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub params: EncoderParams,
    pub log: Vec<LogRecord>,
    pub state: TrainingState,
}

pub fn checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

/// Masks every sequence of a step with one step-seeded generator.
fn mask_batch(
    posts: &[&TokenSequence],
    rate: f64,
    vocab_size: usize,
    scheme: MaskingScheme,
    seed: u64,
    step: usize,
    mlm: bool,
) -> Vec<BatchSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MASK, step as u64));
    posts
        .iter()
        .map(|seq| {
            let outcome = if mlm { mask_tokens(seq, rate, vocab_size, scheme, &mut rng) } else { None };
            match outcome {
                Some(o) => BatchSequence { ids: o.corrupted, positions: o.positions, targets: o.targets },
                None => BatchSequence { ids: seq.ids().to_vec(), positions: Vec::new(), targets: Vec::new() },
            }
        })
        .collect()
}

/// Indices drawn for `step` of `stage`: without replacement when the pool is
/// large enough, in sorted order.
pub fn sample_indices(pool: usize, batch_size: usize, seed: u64, stage: u8, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ stage as u64, STREAM_BATCH, step as u64));
    if batch_size >= pool {
        return (0..pool).collect();
    }
    let mut picked = index::sample(&mut rng, pool, batch_size).into_vec();
    picked.sort_unstable();
    picked
}

/// Tree indices of stage-2 `step`.
pub fn stage2_batch_indices(trees: usize, schedule: &TrainingSchedule, step: usize) -> Vec<usize> {
    sample_indices(trees, schedule.stage2.batch_size, schedule.seed, 2, step)
}

struct StageRunner<'a> {
    stage: u8,
    schedule: &'a TrainingSchedule,
    pep: PepConfig,
    opts: &'a RunOptions,
}

impl StageRunner<'_> {
    fn run<'b, F>(&self, params: EncoderParams, mut make_batch: F) -> Result<StageOutcome>
    where
        F: FnMut(usize) -> StepBatch<'b>,
    {
        let stage_sched = self.schedule.stage(self.stage);
        let mut params = params;
        let mut opt = AdamW::new(self.opts.optimizer, params.num_params());
        let mut first = 1;
        if let Some(ck) = &self.opts.resume {
            if ck.state.stage == self.stage {
                params = ck.params.clone();
                first = ck.state.step as usize + 1;
                opt.step = ck.state.optimizer_step;
                if let Some((m, v)) = &ck.state.moments {
                    opt.m = m.clone();
                    opt.v = v.clone();
                }
            }
        }
        let mut log = Vec::new();
        let state_at = |step: usize, opt: &AdamW| TrainingState {
            stage: self.stage,
            step: step as u64,
            optimizer_step: opt.step,
            moments: Some((opt.m.clone(), opt.v.clone())),
        };
        let last = self.opts.stop_after.map_or(stage_sched.steps, |s| s.min(stage_sched.steps));
        for step in first..=last {
            let lr = stage_sched.lr_at(step);
            let batch = make_batch(step);
            let (losses, grads) = objective(&params, &batch, &self.pep, true)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss { stage: self.stage, step });
            }
            let grads = grads.expect("gradient requested");
            opt.update(&mut params, &grads, lr);
            log.push(LogRecord {
                step,
                stage: self.stage,
                lr,
                mlm_loss: losses.mlm.value,
                rop_loss: losses.pep.rop,
                brp_loss: losses.pep.brp,
                pap_loss: losses.pep.pap,
                total: losses.total,
            });
            if let Some(dir) = &self.opts.checkpoint_dir {
                let every = self.schedule.checkpoint_every;
                if every > 0 && step % every == 0 && step != last {
                    save_checkpoint(&params, &state_at(step, &opt), &checkpoint_path(dir, self.stage))?;
                }
            }
        }
        let state = state_at(last.max(first - 1), &opt);
        if let Some(dir) = &self.opts.checkpoint_dir {
            save_checkpoint(&params, &state, &checkpoint_path(dir, self.stage))?;
        }
        Ok(StageOutcome { params, log, state })
    }
}

/// Stage 1 over an arbitrary post stream: `posts_for(step)` yields the
/// posts of each 1-based step.
pub fn train_stage1_stream<'p, F>(
    posts_for: F,
    params: EncoderParams,
    schedule: &TrainingSchedule,
    mask_rate: f64,
    opts: &RunOptions,
) -> Result<StageOutcome>
where
    F: Fn(usize) -> Vec<&'p TokenSequence>,
{
    schedule.validate()?;
    let pep = PepConfig { rop: false, brp: false, pap: false, mask_rate, ..PepConfig::default() };
    pep.validate()?;
    let scheme = opts.masking.unwrap_or_default();
    let vocab_size = params.config.vocab_size;
    let runner = StageRunner { stage: 1, schedule, pep, opts };
    runner.run(params, |step| StepBatch {
        sequences: mask_batch(&posts_for(step), mask_rate, vocab_size, scheme, schedule.seed, step, true),
        trees: Vec::new(),
    })
}

/// Stage 1: masked-token training on single posts sampled from `corpus`.
pub fn train_stage1(
    corpus: &[TokenSequence],
    params: EncoderParams,
    schedule: &TrainingSchedule,
    mask_rate: f64,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    if corpus.is_empty() && schedule.stage1.steps > 0 {
        return Err(Error::EmptyInput("stage-1 corpus"));
    }
    let batch = schedule.stage1.batch_size;
    train_stage1_stream(
        |step| {
            sample_indices(corpus.len(), batch, schedule.seed, 1, step)
                .into_iter()
                .map(|i| &corpus[i])
                .collect()
        },
        params,
        schedule,
        mask_rate,
        opts,
    )
}

/// Stage 2: each step takes whole trees; the masked-token loss covers all of
/// their posts (re-masked every step) and the relation losses their labels.
pub fn train_stage2(
    trees: &[PreparedTree],
    params: EncoderParams,
    schedule: &TrainingSchedule,
    pep: &PepConfig,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    schedule.validate()?;
    pep.validate()?;
    if trees.is_empty() && schedule.stage2.steps > 0 {
        return Err(Error::EmptyInput("stage-2 conversations"));
    }
    let scheme = opts.masking.unwrap_or_default();
    let vocab_size = params.config.vocab_size;
    let runner = StageRunner { stage: 2, schedule, pep: pep.clone(), opts };
    runner.run(params, |step| {
        let picked = stage2_batch_indices(trees.len(), schedule, step);
        let mut posts = Vec::new();
        let mut batch_trees = Vec::with_capacity(picked.len());
        for &t in &picked {
            let start = posts.len();
            posts.extend(trees[t].posts.iter());
            batch_trees.push(BatchTree { sequences: start..posts.len(), labels: &trees[t].labels });
        }
        StepBatch {
            sequences: mask_batch(&posts, pep.mask_rate, vocab_size, scheme, schedule.seed, step, pep.mlm),
            trees: batch_trees,
        }
    })
}
