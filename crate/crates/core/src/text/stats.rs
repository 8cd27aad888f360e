use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

use super::{prepare, Vocabulary};

const BUCKET_WIDTH: usize = 10;
const BUCKETS: usize = 20;
/// Lengths at or beyond this share one overflow slot for quantiles.
const EXACT_LIMIT: usize = 1024;

pub const SHORT_THRESHOLD: usize = 20;
pub const LONG_THRESHOLD: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthBucket {
    pub lo: usize,
    /// Exclusive upper bound; `None` for the open-ended last bucket.
    pub hi: Option<usize>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStats {
    pub posts: u64,
    pub mean: f64,
    pub max: usize,
    /// Posts with fewer than 20 subword tokens.
    pub under_20: u64,
    /// Posts with more than 100 subword tokens.
    pub over_100: u64,
    pub frac_under_20: f64,
    pub frac_over_100: f64,
    /// `(q, length)` pairs: smallest length with cumulative share ≥ q.
    pub quantiles: Vec<(f64, usize)>,
    pub buckets: Vec<LengthBucket>,
}

/// Constant-memory accumulator over post lengths.
#[derive(Debug, Clone)]
pub struct LengthStatsAccumulator {
    exact: Vec<u64>,
    posts: u64,
    total: u128,
    max: usize,
}

impl Default for LengthStatsAccumulator {
    fn default() -> Self {
        Self { exact: vec![0; EXACT_LIMIT + 1], posts: 0, total: 0, max: 0 }
    }
}

impl LengthStatsAccumulator {
    pub fn add(&mut self, len: usize) {
        self.exact[len.min(EXACT_LIMIT)] += 1;
        self.posts += 1;
        self.total += len as u128;
        self.max = self.max.max(len);
    }

    pub fn finish(&self) -> Result<LengthStats> {
        if self.posts == 0 {
            return Err(Error::EmptyInput("length statistics corpus"));
        }
        let posts = self.posts;
        let under_20: u64 = self.exact[..SHORT_THRESHOLD].iter().sum();
        let over_100: u64 = self.exact[LONG_THRESHOLD + 1..].iter().sum();
        let mut buckets: Vec<LengthBucket> = (0..BUCKETS)
            .map(|b| LengthBucket {
                lo: b * BUCKET_WIDTH,
                hi: Some((b + 1) * BUCKET_WIDTH),
                count: self.exact[b * BUCKET_WIDTH..(b + 1) * BUCKET_WIDTH].iter().sum(),
            })
            .collect();
        buckets.push(LengthBucket {
            lo: BUCKETS * BUCKET_WIDTH,
            hi: None,
            count: self.exact[BUCKETS * BUCKET_WIDTH..].iter().sum(),
        });
        let quantiles = [0.5, 0.9, 0.99]
            .into_iter()
            .map(|q| {
                let need = (q * posts as f64).ceil().max(1.0) as u64;
                let mut seen = 0;
                let len = self
                    .exact
                    .iter()
                    .position(|&c| {
                        seen += c;
                        seen >= need
                    })
                    .unwrap_or(EXACT_LIMIT);
                (q, len)
            })
            .collect();
        Ok(LengthStats {
            posts,
            mean: self.total as f64 / posts as f64,
            max: self.max,
            under_20,
            over_100,
            frac_under_20: under_20 as f64 / posts as f64,
            frac_over_100: over_100 as f64 / posts as f64,
            quantiles,
            buckets,
        })
    }
}

/// Subword-length statistics of a corpus of raw posts, counted without
/// `[CLS]`/`[SEP]` and before truncation.
pub fn length_stats<'a, I>(corpus: I, vocab: &Vocabulary) -> Result<LengthStats>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut acc = LengthStatsAccumulator::default();
    for post in corpus {
        acc.add(vocab.subword_ids(&prepare(post)).len());
    }
    acc.finish()
}

impl LengthStats {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "posts\t{}", self.posts).unwrap();
        writeln!(out, "mean_length\t{:.4}", self.mean).unwrap();
        writeln!(out, "max_length\t{}", self.max).unwrap();
        writeln!(out, "under_20\t{}\t{:.4}%", self.under_20, 100.0 * self.frac_under_20).unwrap();
        writeln!(out, "over_100\t{}\t{:.4}%", self.over_100, 100.0 * self.frac_over_100).unwrap();
        for (q, len) in &self.quantiles {
            writeln!(out, "p{}\t{len}", (q * 100.0).round()).unwrap();
        }
        writeln!(out, "bucket\tcount").unwrap();
        for b in &self.buckets {
            match b.hi {
                Some(hi) => writeln!(out, "{}-{}\t{}", b.lo, hi - 1, b.count).unwrap(),
                None => writeln!(out, "{}+\t{}", b.lo, b.count).unwrap(),
            }
        }
        out
    }
}
