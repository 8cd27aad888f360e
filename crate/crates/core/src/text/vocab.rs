//! Subword vocabulary: frequency-greedy pair merging for training and greedy
//! longest-match segmentation for encoding. Non-initial pieces of a word carry
//! a `##` prefix so encoded words can be joined back together.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{prepare, MAX_POSITIONS, SPECIAL_TOKENS};

pub const UNK_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const USER_ID: u32 = 5;
pub const URL_ID: u32 = 6;
pub const NUM_SPECIAL: u32 = 7;

pub const CONTINUATION: &str = "##";
pub const DEFAULT_VOCAB_SIZE: usize = 52_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from its token list; the seven special tokens must
    /// occupy ids 0-6 in their reserved order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::Config(format!(
                "vocabulary must start with the special tokens {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {tok:?} at id {id}")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        let max_piece_chars = tokens
            .iter()
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self { tokens, index, max_piece_chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    /// Greedy longest-match segmentation of one word. Characters with no
    /// matching piece become `[UNK]`.
    pub fn segment(&self, word: &str, out: &mut Vec<u32>) {
        match word {
            super::USER_TOKEN => return out.push(USER_ID),
            super::URL_TOKEN => return out.push(URL_ID),
            _ => {}
        }
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut piece = String::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let longest = (chars.len() - start).min(self.max_piece_chars);
            for len in (1..=longest).rev() {
                let from = chars[start].0;
                let to = chars.get(start + len).map_or(word.len(), |c| c.0);
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&word[from..to]);
                if let Some(id) = self.id(&piece) {
                    found = Some((id, len));
                    break;
                }
            }
            match found {
                Some((id, len)) => {
                    out.push(id);
                    start += len;
                }
                None => {
                    out.push(UNK_ID);
                    start += 1;
                }
            }
        }
    }

    /// Subword ids for a token list, without `[CLS]`/`[SEP]` or truncation.
    pub fn subword_ids(&self, tokens: &[String]) -> Vec<u32> {
        let mut ids = Vec::new();
        for tok in tokens {
            self.segment(tok, &mut ids);
        }
        ids
    }
}

/// An encoded post: `[CLS] ... [SEP]`, at most [`MAX_POSITIONS`] ids, no padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Copy padded with trailing `[PAD]` up to `len`.
    pub fn padded(&self, len: usize) -> Vec<u32> {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD_ID);
        ids
    }

    /// Length without the trailing `[PAD]` run.
    pub fn unpadded_len(ids: &[u32]) -> usize {
        ids.iter().rposition(|&id| id != PAD_ID).map_or(0, |p| p + 1)
    }
}

pub fn encode(tokens: &[String], vocab: &Vocabulary) -> TokenSequence {
    encode_with_limit(tokens, vocab, MAX_POSITIONS)
}

/// `[CLS]` + subwords + `[SEP]`, dropping tail subwords beyond `max_len`.
pub fn encode_with_limit(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "sequence limit must leave room for [CLS] and [SEP]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    let body = vocab.subword_ids(tokens);
    ids.extend(body.into_iter().take(max_len - 2));
    ids.push(SEP_ID);
    TokenSequence { ids }
}

/// Joins subword pieces back into words, skipping `[CLS]`, `[SEP]` and `[PAD]`.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for &id in seq.ids() {
        if matches!(id, CLS_ID | SEP_ID | PAD_ID) {
            continue;
        }
        let tok = vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK_ID as usize]);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
            _ => words.push(tok.to_owned()),
        }
    }
    words
}

/// Symbols of a word before any merge: first character bare, the rest `##`-prefixed.
fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
        .collect()
}

fn merged_symbol(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

/// Trains a subword vocabulary of at most `target_size` entries from raw posts.
///
/// Posts go through normalization and tokenization first. The alphabet of
/// initial symbols is added in full unless it alone exceeds the budget, in
/// which case the most frequent symbols are kept. Merges then repeatedly fuse
/// the most frequent adjacent pair; ties go to the lexicographically smallest
/// pair.
pub fn build_vocab<'a, I>(corpus: I, target_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_size <= SPECIAL_TOKENS.len() {
        return Err(Error::Config(format!(
            "vocabulary target {target_size} leaves no room beyond the special tokens"
        )));
    }
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut posts = 0usize;
    for post in corpus {
        posts += 1;
        for tok in prepare(post) {
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                continue;
            }
            *word_counts.entry(tok).or_insert(0) += 1;
        }
    }
    if posts == 0 {
        return Err(Error::EmptyInput("vocabulary corpus"));
    }
    let mut words: Vec<(String, u64)> = word_counts.into_iter().collect();
    words.sort();

    let mut symbol_freq: HashMap<String, u64> = HashMap::new();
    for (word, count) in &words {
        for sym in initial_symbols(word) {
            *symbol_freq.entry(sym).or_insert(0) += count;
        }
    }
    let budget = target_size - SPECIAL_TOKENS.len();
    let mut alphabet: Vec<(String, u64)> = symbol_freq.into_iter().collect();
    alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    alphabet.truncate(budget);
    let mut alphabet: Vec<String> = alphabet.into_iter().map(|(s, _)| s).collect();
    alphabet.sort();

    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_id: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        if let Some(&id) = symbol_id.get(&s) {
            return id;
        }
        let id = symbols.len() as u32;
        symbol_id.insert(s.clone(), id);
        symbols.push(s);
        id
    };
    let known: HashSet<&str> = alphabet.iter().map(String::as_str).collect();
    // words become runs of symbol ids; a symbol outside the alphabet splits
    // the word and can never be merged
    let mut segments: Vec<(Vec<u32>, u64)> = Vec::new();
    for (word, count) in &words {
        let mut run = Vec::new();
        for sym in initial_symbols(word) {
            if known.contains(sym.as_str()) {
                run.push(intern(sym, &mut symbols));
            } else if !run.is_empty() {
                segments.push((std::mem::take(&mut run), *count));
            }
        }
        if !run.is_empty() {
            segments.push((run, *count));
        }
    }

    let mut vocab_tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut in_vocab: HashSet<String> = vocab_tokens.iter().cloned().collect();
    for sym in &alphabet {
        if in_vocab.insert(sym.clone()) {
            vocab_tokens.push(sym.clone());
        }
    }

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_where: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, (seg, count)) in segments.iter().enumerate() {
        for pair in seg.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_insert(0) += count;
            pair_where.entry(key).or_default().insert(w);
        }
    }

    while vocab_tokens.len() < target_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(ka, ca), (kb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let a = (&symbols[ka.0 as usize], &symbols[ka.1 as usize]);
                    let b = (&symbols[kb.0 as usize], &symbols[kb.1 as usize]);
                    b.cmp(&a)
                })
            })
            .map(|(k, _)| *k);
        let Some((left, right)) = best else { break };
        let merged = merged_symbol(&symbols[left as usize], &symbols[right as usize]);
        let merged_id = intern(merged.clone(), &mut symbols);
        if in_vocab.insert(merged.clone()) {
            vocab_tokens.push(merged);
        }
        let mut affected: Vec<usize> = pair_where
            .remove(&(left, right))
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        pair_counts.remove(&(left, right));
        for w in affected {
            let (seg, count) = &mut segments[w];
            for pair in seg.windows(2) {
                let key = (pair[0], pair[1]);
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c = c.saturating_sub(*count);
                }
            }
            let mut next = Vec::with_capacity(seg.len());
            let mut i = 0;
            while i < seg.len() {
                if i + 1 < seg.len() && seg[i] == left && seg[i + 1] == right {
                    next.push(merged_id);
                    i += 2;
                } else {
                    next.push(seg[i]);
                    i += 1;
                }
            }
            *seg = next;
            for pair in seg.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_counts.entry(key).or_insert(0) += *count;
                pair_where.entry(key).or_default().insert(w);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Vocabulary::from_tokens(vocab_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn repeated_word_closure() {
        let vocab = build_vocab(["aaaa aaaa", "aaaa"], 12).unwrap();
        assert!(vocab.len() <= 12);
        assert_eq!(&vocab.tokens()[..7], SPECIAL_TOKENS);
        assert!(vocab.id("a").is_some() && vocab.id("##a").is_some());
        assert!(vocab.id("aaaa").is_some());
        let seq = encode(&words(&["aaaa"]), &vocab);
        assert_eq!(seq.ids(), [CLS_ID, vocab.id("aaaa").unwrap(), SEP_ID]);
    }

    #[test]
    fn deterministic_and_tie_broken() {
        let corpus = ["ab cd ab cd xy", "ba dc"];
        let a = build_vocab(corpus, 30).unwrap();
        let b = build_vocab(corpus, 30).unwrap();
        assert_eq!(a.tokens(), b.tokens());
        // "ab" and "cd" are tied at 2; the smaller pair merges first
        let pos_ab = a.id("ab").unwrap();
        let pos_cd = a.id("cd").unwrap();
        assert!(pos_ab < pos_cd);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_vocab(std::iter::empty::<&str>(), 100).is_err());
        assert!(build_vocab(["x"], 7).is_err());
    }

    #[test]
    fn empty_post_encodes_to_cls_sep() {
        let vocab = build_vocab(["a b"], 20).unwrap();
        assert_eq!(encode(&[], &vocab).ids(), [CLS_ID, SEP_ID]);
    }

    #[test]
    fn truncation_keeps_sep() {
        let vocab = build_vocab(["a b c"], 20).unwrap();
        let long: Vec<String> = (0..200).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
        let seq = encode(&long, &vocab);
        assert_eq!(seq.len(), 128);
        assert_eq!(seq.ids()[0], CLS_ID);
        assert_eq!(*seq.ids().last().unwrap(), SEP_ID);
    }

    #[test]
    fn longest_match_trace() {
        let vocab = Vocabulary::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(words(&["u", "un", "unh", "##a", "##p", "##py", "##ppy", "h", "##h"]))
                .collect(),
        )
        .unwrap();
        // "unhappy": longest prefix "unh", then "##a", then "##ppy"
        // "uh!": "u", "##h", then "!" is unknown as a continuation
        let seq = encode(&words(&["unhappy", "uh!", "<url>"]), &vocab);
        let expect = [
            CLS_ID,
            vocab.id("unh").unwrap(),
            vocab.id("##a").unwrap(),
            vocab.id("##ppy").unwrap(),
            vocab.id("u").unwrap(),
            vocab.id("##h").unwrap(),
            UNK_ID,
            URL_ID,
            SEP_ID,
        ];
        assert_eq!(seq.ids(), expect);
        // an unknown piece decodes as its own word
        assert_eq!(decode(&seq, &vocab), words(&["unhappy", "uh", "[UNK]", "<url>"]));
    }

    #[test]
    fn from_tokens_validation() {
        assert!(Vocabulary::from_tokens(words(&["a"])).is_err());
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        toks.push("x".into());
        toks.push("x".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let vocab = build_vocab(["hello world", "hello there"], 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }

    #[test]
    fn padding_helpers() {
        let seq = TokenSequence::from_ids(vec![CLS_ID, 9, SEP_ID]);
        let padded = seq.padded(6);
        assert_eq!(padded, [CLS_ID, 9, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(TokenSequence::unpadded_len(&padded), 3);
    }
}
