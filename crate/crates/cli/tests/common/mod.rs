#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"vocab_size = 300

[model]
layers = 1
heads = 2
hidden_dim = 16
ffn_dim = 32
task_proj_dim = 16

[schedule]
checkpoint_every = 4

[schedule.stage1]
steps = 10
warmup_fraction = 0.1
peak_lr = 0.005
batch_size = 8
decay = "linear"

[schedule.stage2]
steps = 8
warmup_fraction = 0.1
peak_lr = 0.005
batch_size = 4
decay = "linear"

[fewshot]
ks = [10, 20]
repetitions = 2
"#;

/// The binary with every `PEP_*` variable cleared, run from `dir`.
pub fn pep(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pep"));
    cmd.current_dir(dir);
    for var in ["PEP_CONFIG", "PEP_SEED", "PEP_THREADS", "PEP_OUT_DIR"] {
        cmd.env_remove(var);
    }
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

pub fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub fn fails(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// Small config, a structured tree file and its posts as a corpus.
pub fn workspace(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL_CONFIG).unwrap();
    ok(pep(dir).args(["--seed", "3", "generate", "--kind", "structured", "--count", "40", "--output", "trees.jsonl"]));
    let mut corpus = String::new();
    for line in fs::read_to_string(dir.join("trees.jsonl")).unwrap().lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        for post in record["posts"].as_array().unwrap() {
            corpus.push_str(post["text"].as_str().unwrap());
            corpus.push('\n');
        }
    }
    fs::write(dir.join("corpus.txt"), corpus).unwrap();
}
