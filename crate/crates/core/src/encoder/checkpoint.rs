//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "PEPCKPT\0"
//! version  u32
//! config   u32 length + JSON-encoded EncoderConfig
//! stage    u8, step u64, optimizer step u64
//! blocks   u32 count, then per block:
//!          u32 name length, name, u32 rank, u64 per dim,
//!          f64 values (row-major), 8-byte block digest
//! trailer  SHA-256 of every preceding byte
//! ```
//!
//! Block digests are the first 8 bytes of the SHA-256 of the block's values.
//! Optimizer moments, when present, are stored as the blocks `optimizer.m`
//! and `optimizer.v` after the parameters.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PEPCKPT\0";
const DIGEST_LEN: usize = 32;

/// Where a run stands, stored beside the parameters so a resumed run
/// continues on the same trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingState {
    pub stage: u8,
    /// Steps completed within the stage.
    pub step: u64,
    pub optimizer_step: u64,
    /// First and second AdamW moments, flattened in parameter order.
    pub moments: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub state: TrainingState,
}

fn block_digest(values: &[u8]) -> [u8; 8] {
    let full = Sha256::digest(values);
    let mut out = [0; 8];
    out.copy_from_slice(&full[..8]);
    out
}

fn push_block(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let start = buf.len();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = block_digest(&buf[start..]);
    buf.extend_from_slice(&digest);
}

pub fn encode_checkpoint(params: &EncoderParams, state: &TrainingState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.push(state.stage);
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.optimizer_step.to_le_bytes());
    let tensors = params.tensors();
    let extra = if state.moments.is_some() { 2 } else { 0 };
    buf.extend_from_slice(&((tensors.len() + extra) as u32).to_le_bytes());
    for (name, t) in &tensors {
        push_block(&mut buf, name, t.shape(), t.iter().copied());
    }
    if let Some((m, v)) = &state.moments {
        push_block(&mut buf, "optimizer.m", &[m.len()], m.iter().copied());
        push_block(&mut buf, "optimizer.v", &[v.len()], v.iter().copied());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_checkpoint(params: &EncoderParams, state: &TrainingState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, state);
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

struct RawBlock {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

enum BlockError {
    /// The block could not be read; carries the name if it was readable.
    Truncated(Option<String>),
    Digest(String),
}

fn read_block(r: &mut Reader<'_>) -> Result<RawBlock, BlockError> {
    let name_len = r.u32().ok_or(BlockError::Truncated(None))? as usize;
    let name = r
        .take(name_len)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or(BlockError::Truncated(None))?
        .to_owned();
    let truncated = || BlockError::Truncated(Some(name.clone()));
    let rank = r.u32().ok_or_else(truncated)? as usize;
    if rank > 8 {
        return Err(truncated());
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64().ok_or_else(truncated)? as usize);
    }
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
    let bytes = r.take(count.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
    let digest = r.take(8).ok_or_else(truncated)?;
    if block_digest(bytes) != digest {
        return Err(BlockError::Digest(name));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawBlock { name, shape, values })
}

struct Header {
    config: EncoderConfig,
    state: TrainingState,
    blocks: u32,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let bad = |what: &str| Error::CheckpointFormat(format!("unreadable header field `{what}`"));
    let len = r.u32().ok_or_else(|| bad("config"))? as usize;
    let config: EncoderConfig = r
        .take(len)
        .and_then(|b| serde_json::from_slice(b).ok())
        .ok_or_else(|| bad("config"))?;
    let stage = r.u8().ok_or_else(|| bad("stage"))?;
    let step = r.u64().ok_or_else(|| bad("step"))?;
    let optimizer_step = r.u64().ok_or_else(|| bad("optimizer step"))?;
    let blocks = r.u32().ok_or_else(|| bad("block count"))?;
    Ok(Header { config, state: TrainingState { stage, step, optimizer_step, moments: None }, blocks })
}

/// First block that fails to read or verify, for error messages.
fn locate_damage(body: &[u8]) -> Option<String> {
    let mut r = Reader { buf: body, pos: MAGIC.len() + 4 };
    let header = match read_header(&mut r) {
        Ok(h) => h,
        Err(_) => return Some("header".into()),
    };
    for _ in 0..header.blocks {
        match read_block(&mut r) {
            Ok(_) => {}
            Err(BlockError::Digest(name)) | Err(BlockError::Truncated(Some(name))) => return Some(name),
            Err(BlockError::Truncated(None)) => return Some("block table".into()),
        }
    }
    None
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointFormat("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::CheckpointChecksum { block: None });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::CheckpointChecksum { block: locate_damage(body) });
    }

    let mut r = Reader { buf: body, pos: MAGIC.len() + 4 };
    let Header { config, mut state, blocks } = read_header(&mut r)?;
    config.validate()?;
    let mut params = EncoderParams::zeros(&config);
    let mut raw = Vec::with_capacity(blocks as usize);
    for _ in 0..blocks {
        match read_block(&mut r) {
            Ok(b) => raw.push(b),
            Err(BlockError::Digest(name)) => return Err(Error::CheckpointChecksum { block: Some(name) }),
            Err(BlockError::Truncated(name)) => {
                return Err(Error::CheckpointFormat(format!(
                    "block `{}` is truncated",
                    name.unwrap_or_else(|| "?".into())
                )))
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat("trailing bytes after last block".into()));
    }
    let mut raw = raw.into_iter();
    for (name, mut tensor) in params.tensors_mut() {
        let block = raw
            .next()
            .ok_or_else(|| Error::CheckpointFormat(format!("missing block `{name}`")))?;
        if block.name != name || block.shape != tensor.shape() {
            return Err(Error::CheckpointFormat(format!(
                "expected block `{name}` {:?}, found `{}` {:?}",
                tensor.shape(),
                block.name,
                block.shape
            )));
        }
        tensor.iter_mut().zip(block.values).for_each(|(t, v)| *t = v);
    }
    let rest: Vec<RawBlock> = raw.collect();
    match rest.as_slice() {
        [] => {}
        [m, v] if m.name == "optimizer.m" && v.name == "optimizer.v" => {
            state.moments = Some((m.values.clone(), v.values.clone()));
        }
        _ => return Err(Error::CheckpointFormat("unexpected extra blocks".into())),
    }
    Ok(Checkpoint { params, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (EncoderParams, TrainingState) {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            hidden_dim: 8,
            ffn_dim: 8,
            max_positions: 16,
            vocab_size: 12,
            task_proj_dim: 4,
            project_pairs: true,
            init_std: 0.1,
        };
        let p = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let n = p.num_params();
        let state = TrainingState {
            stage: 2,
            step: 17,
            optimizer_step: 17,
            moments: Some(((0..n).map(|i| i as f64 * 1e-3).collect(), vec![0.5; n])),
        };
        (p, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, state) = sample();
        let back = decode_checkpoint(&encode_checkpoint(&p, &state)).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.state, state);
        let bits = |x: &EncoderParams| x.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&p));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let (p, state) = sample();
        let bytes = encode_checkpoint(&p, &state);
        let err = decode_checkpoint(&bytes[..bytes.len() - 100]).unwrap_err();
        assert!(matches!(err, Error::CheckpointChecksum { .. }), "{err}");
    }

    #[test]
    fn flipped_byte_names_block() {
        let (p, state) = sample();
        let mut bytes = encode_checkpoint(&p, &state);
        let needle = b"layer0.ffn.w1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[at + needle.len() + 40] ^= 0x55;
        let err = decode_checkpoint(&bytes).unwrap_err();
        match err {
            Error::CheckpointChecksum { block: Some(b) } => assert_eq!(b, "layer0.ffn.w1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let (p, state) = sample();
        let mut bytes = encode_checkpoint(&p, &state);
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes).unwrap_err(),
            Error::CheckpointVersion { found: 99, expected: CHECKPOINT_VERSION }
        ));
    }
}
