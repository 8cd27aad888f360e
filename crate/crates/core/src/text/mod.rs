//! Social-text preprocessing: normalization, tweet-aware tokenization,
//! subword vocabulary and corpus length statistics.

mod normalize;
mod stats;
mod tokenize;
mod vocab;

pub use normalize::{normalize, NormalizeRules, DEFAULT_MENTION_PATTERN, DEFAULT_URL_PATTERN};
pub use stats::{length_stats, LengthStats, LengthStatsAccumulator};
pub use tokenize::{emoji_aliases, emoji_token, is_placeholder, tokenize};
pub use vocab::{
    build_vocab, decode, encode, encode_with_limit, TokenSequence, Vocabulary, CLS_ID,
    CONTINUATION, DEFAULT_VOCAB_SIZE, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, UNK_ID, URL_ID,
    USER_ID,
};

pub const USER_TOKEN: &str = "<@user>";
pub const URL_TOKEN: &str = "<url>";

/// Special tokens in id order.
pub const SPECIAL_TOKENS: [&str; 7] = ["[UNK]", "[SEP]", "[PAD]", "[CLS]", "[MASK]", USER_TOKEN, URL_TOKEN];

/// Maximum encoded sequence length, `[CLS]` and `[SEP]` included.
pub const MAX_POSITIONS: usize = 128;

/// Normalize then tokenize a raw post.
pub fn prepare(raw: &str) -> Vec<String> {
    tokenize(&normalize(raw))
}

/// Full pipeline from a raw post to an encoded sequence.
pub fn encode_post(raw: &str, vocab: &Vocabulary) -> TokenSequence {
    encode(&prepare(raw), vocab)
}
