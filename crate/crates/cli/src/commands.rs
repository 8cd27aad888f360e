use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use pep_core::config::RunConfig;
use pep_core::conversation::{tree_stats, validation_report, ConversationDataset};
use pep_core::encoder::{load_checkpoint, EncoderParams};
use pep_core::eval::{
    claim_embeddings, curve_table, evaluate, few_shot_run, holdout_split, train_probe, LabeledSet,
};
use pep_core::labels::{derive_all, sparse_export};
use pep_core::synthetic::{stance_claims, structured_trees, StanceConfig, StructuredConfig};
use pep_core::text::{build_vocab, encode_post, normalize, prepare, LengthStatsAccumulator, Vocabulary};
use pep_core::trainer::{checkpoint_path, prepare_trees, train_stage1, train_stage2, LogRecord, RunOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::{now, RunManifest};
use crate::{Cli, Command, EvalArgs, GlobalArgs, SyntheticKind};

fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = global.threads {
        cfg.threads = threads;
    }
    Ok(cfg.resolve()?)
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

/// A started command: its manifest is already on disk.
struct Session {
    manifest: RunManifest,
    path: PathBuf,
}

impl Session {
    fn finish(mut self) -> Result<()> {
        self.manifest.finished_at = Some(now());
        self.manifest.write(&self.path)
    }
}

impl Ctx {
    fn ckpt_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    fn start(&self, name: &str, inputs: &[&Path], artifacts: Vec<PathBuf>) -> Result<Session> {
        let config = self.cfg.to_toml();
        fs::write(self.out.join("config.resolved.toml"), &config)?;
        let manifest = RunManifest {
            command: name.to_owned(),
            seed: self.cfg.seed,
            threads: self.cfg.threads,
            config,
            inputs: RunManifest::digest_inputs(inputs)?,
            artifacts,
            started_at: now(),
            finished_at: None,
        };
        let path = self.out.join(format!("manifest-{name}.json"));
        manifest.write(&path)?;
        Ok(Session { manifest, path })
    }

    /// First of the flag, the config entry and the fallback; it must exist.
    fn input(&self, flag: Option<PathBuf>, configured: &Option<PathBuf>, fallback: Option<PathBuf>, what: &str, hint: &str) -> Result<PathBuf> {
        let Some(path) = flag.or_else(|| configured.clone()).or(fallback) else {
            bail!("no {what} given: {hint}");
        };
        ensure!(path.exists(), "{what} not found at {}: {hint}", path.display());
        Ok(path)
    }

    fn vocab_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.input(
            flag,
            &self.cfg.paths.vocab,
            Some(self.out.join("vocab.txt")),
            "vocabulary",
            "run `pep build-vocab` first or pass --vocab",
        )
    }

    fn conversations_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.input(flag, &self.cfg.paths.conversations, None, "conversation file", "pass --conversations or set paths.conversations")
    }

    fn corpus_path(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.input(flag, &self.cfg.paths.corpus, None, "corpus", "pass --corpus or set paths.corpus")
    }

    fn random_params(&self, vocab_size: usize) -> Result<EncoderParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        Ok(EncoderParams::init(&self.cfg.model.encoder(vocab_size), &mut rng)?)
    }
}

/// Lines of a text file; invalid UTF-8 is reported with its line number.
fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            String::from_utf8(line.to_vec())
                .map_err(|e| anyhow::anyhow!("{}:{}: invalid UTF-8 ({e})", path.display(), i + 1))
        })
        .collect()
}

fn load_dataset(path: &Path) -> Result<ConversationDataset> {
    ConversationDataset::load(path).with_context(|| format!("loading conversations from {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    }
    fs::create_dir_all(&cli.global.out_dir)
        .with_context(|| format!("creating output directory {}", cli.global.out_dir.display()))?;
    let ctx = Ctx { cfg, out: cli.global.out_dir };
    match cli.command {
        Command::Preprocess { input, output } => preprocess(&ctx, &input, output),
        Command::BuildVocab { corpus, size } => build_vocabulary(&ctx, corpus, size),
        Command::DeriveLabels { conversations } => derive_labels(&ctx, conversations),
        Command::Pretrain { stage, vocab, corpus, conversations, init, resume, stop_after } => {
            pretrain(&ctx, stage, vocab, corpus, conversations, init, resume, stop_after)
        }
        Command::Evaluate(args) => probe(&ctx, args, false),
        Command::Fewshot(args) => probe(&ctx, args, true),
        Command::Stats { corpus, vocab, conversations } => stats(&ctx, corpus, vocab, conversations),
        Command::Validate { conversations } => validate(&conversations),
        Command::Generate { kind, count, output } => generate(&ctx, kind, count, output),
        Command::Verify { manifest } => verify(&manifest),
    }
}

fn preprocess(ctx: &Ctx, input: &Path, output: Option<PathBuf>) -> Result<()> {
    let output = output.unwrap_or_else(|| ctx.out.join("normalized.txt"));
    ensure!(
        fs::canonicalize(input).ok() != fs::canonicalize(&output).ok(),
        "refusing to overwrite the input {}",
        input.display()
    );
    let session = ctx.start("preprocess", &[input], vec![output.clone()])?;
    let mut out = String::new();
    for line in read_lines(input)? {
        out.push_str(&normalize(&line));
        out.push('\n');
    }
    fs::write(&output, out)?;
    session.finish()
}

fn build_vocabulary(ctx: &Ctx, corpus: Option<PathBuf>, size: Option<usize>) -> Result<()> {
    let corpus = ctx.corpus_path(corpus)?;
    let target = size.unwrap_or(ctx.cfg.vocab_size);
    let output = ctx.out.join("vocab.txt");
    let session = ctx.start("build-vocab", &[&corpus], vec![output.clone()])?;
    let lines = read_lines(&corpus)?;
    let vocab = build_vocab(lines.iter().map(String::as_str), target)?;
    vocab.save(&output)?;
    println!("vocabulary of {} entries written to {}", vocab.len(), output.display());
    session.finish()
}

fn derive_labels(ctx: &Ctx, conversations: Option<PathBuf>) -> Result<()> {
    let path = ctx.conversations_path(conversations)?;
    let output = ctx.out.join("labels.txt");
    let session = ctx.start("derive-labels", &[&path], vec![output.clone()])?;
    let dataset = load_dataset(&path)?;
    let mut out = String::new();
    for conv in &dataset.conversations {
        out.push_str(&sparse_export(&conv.id, &derive_all(conv)));
    }
    fs::write(&output, out)?;
    session.finish()
}

fn write_log(path: &Path, kept: &[String], records: &[LogRecord]) -> Result<()> {
    let mut out = String::from(LogRecord::HEADER);
    out.push('\n');
    for line in kept {
        out.push_str(line);
        out.push('\n');
    }
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing log {}", path.display()))
}

/// Log lines of an earlier run up to and including `step`.
fn earlier_log(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_lines(path)?
        .into_iter()
        .skip(1)
        .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    ctx: &Ctx,
    stage: u8,
    vocab: Option<PathBuf>,
    corpus: Option<PathBuf>,
    conversations: Option<PathBuf>,
    init: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let vocab_path = ctx.vocab_path(vocab)?;
    let ckpt_dir = ctx.ckpt_dir();
    let ckpt = checkpoint_path(&ckpt_dir, stage);
    let log_path = ctx.out.join(format!("train_stage{stage}.tsv"));
    let data = if stage == 1 { ctx.corpus_path(corpus)? } else { ctx.conversations_path(conversations)? };
    let start = if stage == 2 {
        Some(ctx.input(
            init,
            &ctx.cfg.paths.checkpoint,
            Some(checkpoint_path(&ckpt_dir, 1)),
            "stage-1 checkpoint",
            "stage 2 continues from stage 1; run `pep pretrain --stage 1` first or pass --init",
        )?)
    } else {
        None
    };
    let mut inputs: Vec<&Path> = vec![&vocab_path, &data];
    inputs.extend(start.as_deref());
    let session = ctx.start(&format!("pretrain-stage{stage}"), &inputs, vec![ckpt.clone(), log_path.clone()])?;

    let vocab = Vocabulary::load(&vocab_path)?;
    fs::create_dir_all(&ckpt_dir)?;
    let mut opts = RunOptions { optimizer: ctx.cfg.optimizer, checkpoint_dir: Some(ckpt_dir), stop_after, ..RunOptions::default() };
    let mut kept = Vec::new();
    if resume {
        ensure!(ckpt.exists(), "nothing to resume: no stage-{stage} checkpoint at {}", ckpt.display());
        let ck = load_checkpoint(&ckpt)?;
        ensure!(ck.state.stage == stage, "{} holds a stage-{} state", ckpt.display(), ck.state.stage);
        kept = earlier_log(&log_path, ck.state.step)?;
        opts.resume = Some(ck);
    }
    let outcome = if stage == 1 {
        let posts: Vec<_> = read_lines(&data)?
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| encode_post(l, &vocab))
            .collect();
        let params = ctx.random_params(vocab.len())?;
        train_stage1(&posts, params, &ctx.cfg.schedule, ctx.cfg.pep.mask_rate, &opts)?
    } else {
        let start = start.expect("stage 2 has a starting checkpoint");
        let params = load_checkpoint(&start)?.params;
        ensure!(
            params.config.vocab_size == vocab.len(),
            "checkpoint {} expects {} vocabulary entries, {} has {}",
            start.display(),
            params.config.vocab_size,
            vocab_path.display(),
            vocab.len()
        );
        let dataset = load_dataset(&data)?;
        let trees = prepare_trees(&dataset.conversations, &vocab, ctx.cfg.schedule.max_tree_posts, ctx.cfg.seed);
        train_stage2(&trees, params, &ctx.cfg.schedule, &ctx.cfg.pep, &opts)?
    };
    write_log(&log_path, &kept, &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!("stage {stage}: {} steps, final loss {:.4}, checkpoint {}", last.step, last.total, ckpt.display());
    }
    session.finish()
}

fn probe(ctx: &Ctx, args: EvalArgs, fewshot: bool) -> Result<()> {
    let data = ctx.conversations_path(args.conversations)?;
    let vocab_path = ctx.vocab_path(args.vocab)?;
    let ckpt = if args.random_init {
        None
    } else {
        Some(ctx.input(
            args.checkpoint,
            &ctx.cfg.paths.checkpoint,
            Some(checkpoint_path(&ctx.ckpt_dir(), 2)),
            "encoder checkpoint",
            "run `pep pretrain` first, pass --checkpoint, or use --random-init",
        )?)
    };
    let init = if ckpt.is_some() { "pretrained" } else { "random" };
    let command = if fewshot { "fewshot" } else { "evaluate" };
    let artifacts = if fewshot {
        vec![ctx.out.join(format!("fewshot_{init}.tsv")), ctx.out.join(format!("fewshot_{init}.jsonl"))]
    } else {
        vec![ctx.out.join(format!("metrics_{init}.json"))]
    };
    let mut inputs: Vec<&Path> = vec![&data, &vocab_path];
    inputs.extend(ckpt.as_deref());
    let session = ctx.start(&format!("{command}-{init}"), &inputs, artifacts.clone())?;

    let dataset = load_dataset(&data)?;
    ensure!(dataset.labeled, "{} has no labels; evaluation needs labeled claims", data.display());
    let classes = dataset.classes();
    ensure!(classes.len() >= 2, "evaluation needs at least two classes, found {}", classes.len());
    let labels: Vec<usize> = dataset
        .conversations
        .iter()
        .map(|c| classes.iter().position(|k| Some(k) == c.label.as_ref()).expect("label among classes"))
        .collect();
    let vocab = Vocabulary::load(&vocab_path)?;
    let params = match &ckpt {
        Some(path) => load_checkpoint(path)?.params,
        None => ctx.random_params(vocab.len())?,
    };
    ensure!(params.config.vocab_size == vocab.len(), "encoder and vocabulary sizes differ");
    let claims: Vec<_> = prepare_trees(&dataset.conversations, &vocab, ctx.cfg.schedule.max_tree_posts, ctx.cfg.seed)
        .into_iter()
        .map(|t| t.posts)
        .collect();
    let features = claim_embeddings(&claims, &params, ctx.cfg.eval.pooling)?;
    let all = LabeledSet::new(features, labels.clone())?;
    let (train_rows, test_rows) = holdout_split(&labels, ctx.cfg.eval.test_fraction, ctx.cfg.seed);
    let (train, test) = (all.subset(&train_rows), all.subset(&test_rows));

    if fewshot {
        let name = data.file_stem().map_or_else(|| "data".to_owned(), |s| s.to_string_lossy().into_owned());
        let curve = few_shot_run(&train, &test, classes.len(), &ctx.cfg.fewshot, &name, init)?;
        fs::write(&artifacts[0], curve_table(&curve.points))?;
        let mut lines = String::new();
        for r in &curve.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        fs::write(&artifacts[1], lines)?;
        print!("{}", curve_table(&curve.points));
    } else {
        let probe = train_probe(train.features.view(), &train.labels, classes.len(), &ctx.cfg.probe)?;
        let metrics = evaluate(&probe.predict(test.features.view()), &test.labels, classes.len(), ctx.cfg.eval.balanced)?;
        let report = json!({
            "init": init,
            "classes": classes,
            "train": train.len(),
            "test": test.len(),
            "probe_converged": probe.converged,
            "metrics": metrics,
        });
        fs::write(&artifacts[0], serde_json::to_string_pretty(&report)? + "\n")?;
        println!("{init} encoder: accuracy {:.4}, macro F1 {:.4} on {} held-out claims", metrics.accuracy, metrics.macro_f1, test.len());
    }
    session.finish()
}

fn stats(ctx: &Ctx, corpus: Option<PathBuf>, vocab: Option<PathBuf>, conversations: Option<PathBuf>) -> Result<()> {
    let corpus = corpus.or_else(|| ctx.cfg.paths.corpus.clone());
    let conversations = conversations.or_else(|| ctx.cfg.paths.conversations.clone());
    ensure!(corpus.is_some() || conversations.is_some(), "nothing to summarize: pass --corpus and/or --conversations");
    let vocab_path = corpus.as_ref().map(|_| ctx.vocab_path(vocab)).transpose()?;
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(corpus.as_deref());
    inputs.extend(vocab_path.as_deref());
    inputs.extend(conversations.as_deref());
    let length_out = ctx.out.join("length_stats.tsv");
    let tree_out = ctx.out.join("tree_stats.json");
    let session = ctx.start("stats", &inputs, vec![length_out.clone(), tree_out.clone()])?;
    if let (Some(corpus), Some(vocab_path)) = (&corpus, &vocab_path) {
        let vocab = Vocabulary::load(vocab_path)?;
        let mut acc = LengthStatsAccumulator::default();
        for line in read_lines(corpus)? {
            acc.add(vocab.subword_ids(&prepare(&line)).len());
        }
        let table = acc.finish()?.to_table();
        fs::write(&length_out, &table)?;
        print!("{table}");
    }
    if let Some(path) = &conversations {
        let s = tree_stats(&load_dataset(path)?)?;
        fs::write(&tree_out, serde_json::to_string_pretty(&s)? + "\n")?;
        println!("claims {} posts {} mean {:.2} max {} depth {}", s.claims, s.total_posts, s.mean_posts, s.max_posts, s.max_depth);
    }
    session.finish()
}

fn validate(path: &Path) -> Result<()> {
    let report = validation_report(path)?;
    for line in &report {
        println!("{line}");
    }
    ensure!(report.is_empty(), "{} invalid records in {}", report.len(), path.display());
    println!("{}: all records valid", path.display());
    Ok(())
}

fn generate(ctx: &Ctx, kind: SyntheticKind, count: usize, output: Option<PathBuf>) -> Result<()> {
    let name = match kind {
        SyntheticKind::Structured => "structured",
        SyntheticKind::Stance => "stance",
    };
    let output = output.unwrap_or_else(|| ctx.out.join(format!("{name}.jsonl")));
    let session = ctx.start(&format!("generate-{name}"), &[], vec![output.clone()])?;
    let convs = match kind {
        SyntheticKind::Structured => structured_trees(&StructuredConfig { trees: count, ..Default::default() }, ctx.cfg.seed),
        SyntheticKind::Stance => stance_claims(&StanceConfig { claims: count, ..Default::default() }, ctx.cfg.seed),
    };
    fs::write(&output, ConversationDataset::new(convs)?.to_jsonl())?;
    session.finish()
}

fn verify(path: &Path) -> Result<()> {
    let manifest = RunManifest::load(path)?;
    let changed = manifest.changed_inputs()?;
    ensure!(
        changed.is_empty(),
        "inputs changed since the run: {}",
        changed.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    );
    println!("{} inputs match their recorded digests", manifest.inputs.len());
    Ok(())
}
