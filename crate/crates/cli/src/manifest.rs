use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation. Written before the work starts and
/// again, with `finished_at` set, when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    /// The resolved configuration as TOML.
    pub config: String,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<PathBuf>,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn digest_inputs(paths: &[&Path]) -> Result<Vec<InputDigest>> {
        paths.iter().map(|p| Ok(InputDigest { path: p.to_path_buf(), sha256: sha256_file(p)? })).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Inputs whose current digest differs from the recorded one.
    pub fn changed_inputs(&self) -> Result<Vec<PathBuf>> {
        let mut changed = Vec::new();
        for input in &self.inputs {
            if !input.path.exists() || sha256_file(&input.path)? != input.sha256 {
                changed.push(input.path.clone());
            }
        }
        Ok(changed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn detects_changed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.txt");
        fs::write(&p, "one").unwrap();
        let m = RunManifest {
            command: "x".into(),
            seed: 0,
            threads: 1,
            config: String::new(),
            inputs: RunManifest::digest_inputs(&[&p]).unwrap(),
            artifacts: vec![],
            started_at: 0,
            finished_at: None,
        };
        let mp = dir.path().join("m.json");
        m.write(&mp).unwrap();
        assert_eq!(RunManifest::load(&mp).unwrap(), m);
        assert!(m.changed_inputs().unwrap().is_empty());
        fs::write(&p, "two").unwrap();
        assert_eq!(m.changed_inputs().unwrap(), vec![p]);
    }
}
