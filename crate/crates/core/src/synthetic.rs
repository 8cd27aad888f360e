//! Seeded generators of conversation trees with planted structure, used for
//! tests, demos and small directional experiments.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::{ClaimConversation, Post};
use crate::eval::GraphSample;
use crate::text::{prepare, Vocabulary, SPECIAL_TOKENS};

/// The worked example tree: 0 is the source, with threads 0-1-2-3-4,
/// 0-1-5-6 and 0-7-8.
pub fn example_tree() -> ClaimConversation {
    tree_from_parents("example", &[None, Some(0), Some(1), Some(2), Some(3), Some(1), Some(5), Some(0), Some(7)])
}

/// Parent list of a random tree in canonical order. Each post attaches to
/// its predecessor with probability `chain_bias`, else to a uniform earlier
/// post, which mixes deep threads with bushy fans.
pub fn random_parents<R: Rng + ?Sized>(n: usize, chain_bias: f64, rng: &mut R) -> Vec<Option<usize>> {
    (0..n)
        .map(|i| match i {
            0 => None,
            _ if rng.random_bool(chain_bias) => Some(i - 1),
            _ => Some(rng.random_range(0..i)),
        })
        .collect()
}

pub fn tree_from_parents(id: impl Into<String>, parents: &[Option<usize>]) -> ClaimConversation {
    let posts = parents
        .iter()
        .enumerate()
        .map(|(i, &p)| Post { text: format!("post {i}"), parent: p })
        .collect();
    ClaimConversation::new(id, posts, None).expect("generated parents form a tree")
}

/// Parents drawn uniformly among earlier posts that still have room for
/// another child.
fn bounded_parents<R: Rng + ?Sized>(n: usize, max_children: usize, rng: &mut R) -> Vec<Option<usize>> {
    let mut parents = vec![None];
    let mut children = vec![0usize; n];
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&p| children[p] < max_children).collect();
        let p = *open.choose(rng).expect("a tree always has a leaf with room");
        children[p] += 1;
        parents.push(Some(p));
    }
    parents
}

/// Trees whose replies carry the topic word of their thread (the subtree
/// under one child of the source) and quote one phrase of their parent.
/// Every post holds one fresh phrase per reply it receives plus
/// `extra_phrases` never quoted, so a parent and its child share exactly one
/// word while siblings share none beyond the topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredConfig {
    pub trees: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub max_children: usize,
    pub topics: usize,
    /// Size of the phrase-word pool; raised as needed to cover a tree.
    pub phrases: usize,
    pub extra_phrases: usize,
}

impl Default for StructuredConfig {
    fn default() -> Self {
        Self { trees: 500, min_posts: 6, max_posts: 14, max_children: 3, topics: 24, phrases: 64, extra_phrases: 1 }
    }
}

/// Topic index of every post: each child of the source starts a thread with
/// its own topic, inherited by all its descendants; the source gets none.
fn thread_topics<R: Rng + ?Sized>(parents: &[Option<usize>], topics: usize, rng: &mut R) -> Vec<Option<usize>> {
    let mut pool: Vec<usize> = (0..topics).collect();
    pool.shuffle(rng);
    let mut next = 0;
    let mut out: Vec<Option<usize>> = Vec::with_capacity(parents.len());
    for p in parents {
        let t = match p {
            None => None,
            Some(0) => {
                let t = pool[next % topics];
                next += 1;
                Some(t)
            }
            Some(p) => out[*p],
        };
        out.push(t);
    }
    out
}

/// Per post: its own phrase words, and the phrase it quotes from its parent.
fn quoted_phrases<R: Rng + ?Sized>(
    parents: &[Option<usize>],
    pool: usize,
    extra: usize,
    rng: &mut R,
) -> (Vec<Vec<String>>, Vec<Option<String>>) {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    let needed = n - 1 + n * extra;
    let mut words: Vec<usize> = (0..pool.max(needed)).collect();
    words.shuffle(rng);
    let mut words = words.into_iter().map(|w| format!("q{w}"));
    let mut own = vec![Vec::new(); n];
    let mut quote = vec![None; n];
    for i in 0..n {
        for &c in &children[i] {
            let w = words.next().expect("pool covers the tree");
            own[i].push(w.clone());
            quote[c] = Some(w);
        }
        own[i].extend(words.by_ref().take(extra));
        own[i].shuffle(rng);
    }
    (own, quote)
}

pub fn structured_trees(config: &StructuredConfig, seed: u64) -> Vec<ClaimConversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.trees)
        .map(|t| {
            let n = rng.random_range(config.min_posts..=config.max_posts);
            let parents = bounded_parents(n, config.max_children, &mut rng);
            let topics = thread_topics(&parents, config.topics, &mut rng);
            let (own, quote) = quoted_phrases(&parents, config.phrases, config.extra_phrases, &mut rng);
            let posts = parents
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let mut words = vec![topics[i].map_or_else(|| "claim".to_owned(), |t| format!("t{t}"))];
                    words.extend(quote[i].iter().cloned());
                    words.extend(own[i].iter().cloned());
                    Post { text: words.join(" "), parent: p }
                })
                .collect();
            ClaimConversation::new(format!("s{t}"), posts, None).expect("generated tree")
        })
        .collect()
}

/// Labeled claims: replies either back (`support`) or dispute (`deny`) the
/// source. Each reply to the source opens a thread whose stance matches the
/// class, flipped with probability `reply_noise`; every post in the thread
/// draws its stance words from that stance, so stance is shared along
/// branches. The source mixes both sets. Every post also carries
/// class-independent filler words. With `quotes`, replies also quote a
/// phrase of their parent as in [`structured_trees`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceConfig {
    pub claims: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub max_children: usize,
    /// Distinct words per stance.
    pub stance_words: usize,
    /// Stance words in each post.
    pub words_per_post: usize,
    pub reply_noise: f64,
    /// Replies quote a phrase of their parent.
    pub quotes: bool,
    /// Words per post drawn uniformly from a shared pool of `filler_pool`.
    pub fillers: usize,
    pub filler_pool: usize,
    pub phrases: usize,
}

impl Default for StanceConfig {
    fn default() -> Self {
        Self {
            claims: 600,
            min_posts: 4,
            max_posts: 10,
            max_children: 3,
            stance_words: 200,
            words_per_post: 3,
            reply_noise: 0.1,
            quotes: false,
            fillers: 3,
            filler_pool: 64,
            phrases: 32,
        }
    }
}

pub const STANCE_CLASSES: [&str; 2] = ["support", "deny"];

fn stance_word(stance: usize, index: usize) -> String {
    format!("{}{index}", ["pro", "con"][stance])
}

pub fn stance_claims(config: &StanceConfig, seed: u64) -> Vec<ClaimConversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.claims)
        .map(|c| {
            let class = c % 2;
            let n = rng.random_range(config.min_posts..=config.max_posts);
            let parents = bounded_parents(n, config.max_children, &mut rng);
            let (own, quote) = quoted_phrases(&parents, config.phrases, 0, &mut rng);
            let mut thread: Vec<Option<usize>> = Vec::with_capacity(n);
            for p in &parents {
                let s = match p {
                    None => None,
                    Some(0) if rng.random_bool(config.reply_noise) => Some(1 - class),
                    Some(0) => Some(class),
                    Some(p) => thread[*p],
                };
                thread.push(s);
            }
            let posts = parents
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let mut words: Vec<String> = (0..config.words_per_post)
                        .map(|_| {
                            let stance = thread[i].unwrap_or_else(|| rng.random_range(0..2));
                            stance_word(stance, rng.random_range(0..config.stance_words))
                        })
                        .collect();
                    for _ in 0..config.fillers {
                        words.push(format!("f{}", rng.random_range(0..config.filler_pool)));
                    }
                    if config.quotes {
                        words.extend(quote[i].iter().cloned());
                        words.extend(own[i].iter().cloned());
                    }
                    Post { text: words.join(" "), parent: p }
                })
                .collect();
            ClaimConversation::new(format!("c{c}"), posts, Some(STANCE_CLASSES[class].to_owned()))
                .expect("generated tree")
        })
        .collect()
}

/// Graphs with one marked post at depth 1 or 2; the label is the depth
/// parity. Node features are `[1, is_source, is_marked]`.
pub fn depth_parity_graphs(count: usize, seed: u64) -> (Vec<GraphSample>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rng.random_range(4..=10);
        let parents = bounded_parents(n, 3, &mut rng);
        let depth: Vec<usize> = {
            let mut d = vec![0; n];
            for i in 1..n {
                d[i] = d[parents[i].expect("reply")] + 1;
            }
            d
        };
        let want = rng.random_range(1..=2);
        let candidates: Vec<usize> = (1..n).filter(|&i| depth[i] == want).collect();
        let Some(&marked) = candidates.choose(&mut rng) else { continue };
        let mut x = Array2::zeros((n, 3));
        for i in 0..n {
            x[[i, 0]] = 1.0;
        }
        x[[0, 1]] = 1.0;
        x[[marked, 2]] = 1.0;
        graphs.push(GraphSample::from_parents(x, &parents));
        labels.push(want % 2);
    }
    (graphs, labels)
}

/// A vocabulary holding every whole word of the given conversations, so
/// each word encodes to a single id.
pub fn word_vocabulary(conversations: &[ClaimConversation]) -> Vocabulary {
    let words: BTreeSet<String> =
        conversations.iter().flat_map(|c| c.texts().flat_map(prepare).collect::<Vec<_>>()).collect();
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())))
        .collect();
    Vocabulary::from_tokens(tokens).expect("distinct whitespace-free words")
}
