//! Claim conversations as rooted propagation trees.
//!
//! A conversation is a source post plus its replies, each reply naming the
//! index of the post it answers. Every constructed [`ClaimConversation`] is
//! validated and canonically ordered: the source post sits at index 0 and
//! every parent precedes its children.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConversationError, Error, Result};

/// Default cap on posts per tree used during stage-2 training.
pub const DEFAULT_MAX_POSTS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub text: String,
    pub parent: Option<usize>,
}

impl Post {
    pub fn root(text: impl Into<String>) -> Self {
        Self { text: text.into(), parent: None }
    }

    pub fn reply(text: impl Into<String>, parent: usize) -> Self {
        Self { text: text.into(), parent: Some(parent) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimConversation {
    pub id: String,
    pub posts: Vec<Post>,
    pub label: Option<String>,
}

/// Wire form of one line of a conversation file. Unknown fields such as
/// timestamps or user metadata are accepted and dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub posts: Vec<RecordPost>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordPost {
    pub text: String,
    pub parent: Option<i64>,
}

impl ClaimConversation {
    /// Validates the posts and returns the canonically ordered conversation.
    pub fn new(
        id: impl Into<String>,
        posts: Vec<Post>,
        label: Option<String>,
    ) -> Result<Self, ConversationError> {
        let conv = Self { id: id.into(), posts, label };
        conv.validate()?;
        Ok(canonical_order(&conv))
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.posts[i].parent
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.posts.iter().map(|p| p.text.as_str())
    }

    /// Checks every structural invariant except ordering.
    pub fn validate(&self) -> Result<(), ConversationError> {
        let id = || self.id.clone();
        let n = self.posts.len();
        if n == 0 {
            return Err(ConversationError::NoPosts { id: id() });
        }
        for (i, post) in self.posts.iter().enumerate() {
            if post.text.trim().is_empty() {
                return Err(ConversationError::EmptyText { id: id(), post: i });
            }
            if let Some(p) = post.parent {
                if p >= n {
                    return Err(ConversationError::DanglingParent {
                        id: id(),
                        post: i,
                        parent: p as i64,
                    });
                }
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| self.posts[i].parent.is_none()).collect();
        match roots.len() {
            0 => return Err(ConversationError::MissingRoot { id: id() }),
            1 => {}
            _ => return Err(ConversationError::MultipleRoots { id: id(), roots }),
        }
        // 0 = unvisited, 1 = on current walk, 2 = known to reach the root
        let mut state = vec![0u8; n];
        state[roots[0]] = 2;
        for start in 0..n {
            let mut walk = Vec::new();
            let mut cur = start;
            while state[cur] == 0 {
                state[cur] = 1;
                walk.push(cur);
                cur = self.posts[cur].parent.expect("only the root lacks a parent");
            }
            if state[cur] == 1 {
                return Err(ConversationError::Cycle { id: id(), post: cur });
            }
            for v in walk {
                state[v] = 2;
            }
        }
        Ok(())
    }

    /// True when the root is at index 0 and `parent(i) < i` for all replies.
    pub fn is_canonical(&self) -> bool {
        self.posts.first().is_some_and(|p| p.parent.is_none())
            && self
                .posts
                .iter()
                .enumerate()
                .skip(1)
                .all(|(i, p)| p.parent.is_some_and(|q| q < i))
    }

    /// Children of every node, in index order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.len()];
        for (i, post) in self.posts.iter().enumerate() {
            if let Some(p) = post.parent {
                children[p].push(i);
            }
        }
        children
    }

    /// Depth of every node (root = 0). Requires canonical order.
    pub fn depths(&self) -> Vec<usize> {
        debug_assert!(self.is_canonical());
        let mut depth = vec![0; self.len()];
        for i in 1..self.len() {
            depth[i] = depth[self.posts[i].parent.unwrap()] + 1;
        }
        depth
    }

    pub fn max_depth(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }

    /// Undirected edge list `(parent, child)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.posts
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.parent.map(|q| (q, i)))
            .collect()
    }

    /// Keeps the root and grows a random connected subtree of at most `cap`
    /// posts by repeatedly drawing a node uniformly from the current frontier.
    pub fn subsample<R: Rng + ?Sized>(&self, cap: usize, rng: &mut R) -> Self {
        let cap = cap.max(1);
        if self.len() <= cap {
            return self.clone();
        }
        let children = self.children();
        let mut keep = vec![false; self.len()];
        keep[0] = true;
        let mut frontier: Vec<usize> = children[0].clone();
        let mut kept = 1;
        while kept < cap && !frontier.is_empty() {
            let pick = frontier.swap_remove(rng.random_range(0..frontier.len()));
            keep[pick] = true;
            kept += 1;
            frontier.extend_from_slice(&children[pick]);
        }
        let mut remap = vec![usize::MAX; self.len()];
        let mut posts = Vec::with_capacity(kept);
        for (i, post) in self.posts.iter().enumerate() {
            if keep[i] {
                remap[i] = posts.len();
                posts.push(Post { text: post.text.clone(), parent: post.parent.map(|p| remap[p]) });
            }
        }
        Self { id: self.id.clone(), posts, label: self.label.clone() }
    }

    pub fn to_record(&self) -> ConversationRecord {
        ConversationRecord {
            id: self.id.clone(),
            label: self.label.clone(),
            posts: self
                .posts
                .iter()
                .map(|p| RecordPost { text: p.text.clone(), parent: p.parent.map(|q| q as i64) })
                .collect(),
        }
    }
}

impl TryFrom<ConversationRecord> for ClaimConversation {
    type Error = ConversationError;

    fn try_from(record: ConversationRecord) -> Result<Self, ConversationError> {
        let n = record.posts.len();
        let mut posts = Vec::with_capacity(n);
        for (i, p) in record.posts.into_iter().enumerate() {
            let parent = match p.parent {
                None => None,
                Some(q) if q >= 0 && (q as usize) < n => Some(q as usize),
                Some(q) => {
                    return Err(ConversationError::DanglingParent { id: record.id, post: i, parent: q })
                }
            };
            posts.push(Post { text: p.text, parent });
        }
        ClaimConversation::new(record.id, posts, record.label)
    }
}

/// Parses one line of a conversation file.
pub fn parse_conversation(record: &str) -> Result<ClaimConversation, ConversationError> {
    let parsed: ConversationRecord = serde_json::from_str(record).map_err(|e| {
        // best effort at naming the record even when the rest is malformed
        let id = serde_json::from_str::<serde_json::Value>(record)
            .ok()
            .and_then(|v| v.get("id").and_then(|x| x.as_str()).map(str::to_owned))
            .unwrap_or_else(|| "<unknown>".to_owned());
        ConversationError::Malformed { id, reason: e.to_string() }
    })?;
    ClaimConversation::try_from(parsed)
}

/// Index permutation `new -> old` that puts a validated tree in canonical
/// order. The identity when the input is already topological; otherwise a
/// breadth-first walk from the root with siblings in original order.
pub fn canonical_permutation(tree: &ClaimConversation) -> Vec<usize> {
    if tree.is_canonical() {
        return (0..tree.len()).collect();
    }
    let root = tree
        .posts
        .iter()
        .position(|p| p.parent.is_none())
        .expect("validated tree has a root");
    let children = tree.children();
    let mut order = Vec::with_capacity(tree.len());
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        queue.extend(children[v].iter().copied());
    }
    order
}

/// Returns the canonically ordered copy of a validated tree. Idempotent.
pub fn canonical_order(tree: &ClaimConversation) -> ClaimConversation {
    let order = canonical_permutation(tree);
    let mut new_index = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let posts = order
        .iter()
        .map(|&old| {
            let post = &tree.posts[old];
            Post { text: post.text.clone(), parent: post.parent.map(|p| new_index[p]) }
        })
        .collect();
    ClaimConversation { id: tree.id.clone(), posts, label: tree.label.clone() }
}

#[derive(Debug, Clone, Default)]
pub struct ConversationDataset {
    pub conversations: Vec<ClaimConversation>,
    pub labeled: bool,
}

impl ConversationDataset {
    pub fn new(conversations: Vec<ClaimConversation>) -> Result<Self> {
        let with_label = conversations.iter().filter(|c| c.label.is_some()).count();
        if with_label != 0 && with_label != conversations.len() {
            return Err(Error::Config(format!(
                "dataset mixes labeled and unlabeled claims ({with_label} of {} labeled)",
                conversations.len()
            )));
        }
        let labeled = !conversations.is_empty() && with_label == conversations.len();
        Ok(Self { conversations, labeled })
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    /// Loads a JSON-lines conversation file, failing on the first bad record.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut conversations = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Input {
                path: path.to_owned(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let conv = parse_conversation(&line).map_err(|e| Error::Input {
                path: path.to_owned(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            conversations.push(conv);
        }
        Self::new(conversations)
    }

    /// Serializes the dataset as JSON lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for conv in &self.conversations {
            out.push_str(&serde_json::to_string(&conv.to_record()).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Distinct labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let mut classes: Vec<String> =
            self.conversations.iter().filter_map(|c| c.label.clone()).collect();
        classes.sort();
        classes.dedup();
        classes
    }
}

/// Validates every line of a conversation file; one message per bad line.
pub fn validation_report(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut report = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        match line {
            Err(e) => report.push(format!("line {}: {e}", lineno + 1)),
            Ok(line) if line.trim().is_empty() => {}
            Ok(line) => {
                if let Err(e) = parse_conversation(&line) {
                    report.push(format!("line {}: {e}", lineno + 1));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeStats {
    pub claims: usize,
    pub total_posts: usize,
    pub mean_posts: f64,
    pub max_posts: usize,
    pub max_depth: usize,
    /// Number of claims whose deepest reply sits at each depth.
    pub depth_histogram: BTreeMap<usize, usize>,
}

pub fn tree_stats(dataset: &ConversationDataset) -> Result<TreeStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("conversation dataset"));
    }
    let mut total_posts = 0;
    let mut max_posts = 0;
    let mut depth_histogram = BTreeMap::new();
    for conv in &dataset.conversations {
        total_posts += conv.len();
        max_posts = max_posts.max(conv.len());
        *depth_histogram.entry(conv.max_depth()).or_insert(0) += 1;
    }
    let claims = dataset.len();
    Ok(TreeStats {
        claims,
        total_posts,
        mean_posts: total_posts as f64 / claims as f64,
        max_posts,
        max_depth: depth_histogram.keys().next_back().copied().unwrap_or(0),
        depth_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(id: &str, posts: Vec<Post>) -> ClaimConversation {
        ClaimConversation { id: id.into(), posts, label: None }
    }

    #[test]
    fn chain_is_already_canonical() {
        let line = r#"{"id":"c1","posts":[{"text":"A","parent":null},{"text":"B","parent":0},{"text":"C","parent":1}]}"#;
        let conv = parse_conversation(line).unwrap();
        assert_eq!(conv.len(), 3);
        assert_eq!(conv.posts[0].text, "A");
        assert_eq!(conv.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(canonical_order(&conv), conv);
    }

    #[test]
    fn two_roots_rejected() {
        let line = r#"{"id":"x","posts":[{"text":"A","parent":null},{"text":"B","parent":null}]}"#;
        let err = parse_conversation(line).unwrap_err();
        assert!(matches!(err, ConversationError::MultipleRoots { .. }));
        assert!(err.to_string().contains("record x"));
    }

    #[test]
    fn child_before_parent_is_reordered() {
        let conv = raw(
            "r",
            vec![Post::reply("c", 2), Post::reply("b", 3), Post::reply("a", 3), Post::root("root")],
        );
        conv.validate().unwrap();
        let canon = canonical_order(&conv);
        assert!(canon.is_canonical());
        let texts: Vec<_> = canon.texts().collect();
        assert_eq!(texts, ["root", "b", "a", "c"]);
    }

    #[test]
    fn star_with_root_last() {
        let conv = raw(
            "s",
            vec![Post::reply("x", 3), Post::reply("y", 3), Post::reply("z", 3), Post::root("r")],
        );
        let canon = canonical_order(&conv);
        let texts: Vec<_> = canon.texts().collect();
        assert_eq!(texts, ["r", "x", "y", "z"]);
        assert!(canon.posts[1..].iter().all(|p| p.parent == Some(0)));
        assert_eq!(canonical_order(&canon), canon);
    }

    #[test]
    fn error_classes() {
        let cases = [
            (r#"{"id":"a","posts":[]}"#, "no posts"),
            (r#"{"id":"a","posts":[{"text":"  ","parent":null}]}"#, "empty text"),
            (r#"{"id":"a","posts":[{"text":"x","parent":null},{"text":"y","parent":5}]}"#, "does not exist"),
            (r#"{"id":"a","posts":[{"text":"x","parent":null},{"text":"y","parent":-1}]}"#, "does not exist"),
            (r#"{"id":"a","posts":[{"text":"x","parent":1},{"text":"y","parent":0}]}"#, "missing root"),
            (
                r#"{"id":"a","posts":[{"text":"x","parent":null},{"text":"y","parent":2},{"text":"z","parent":1}]}"#,
                "cycle",
            ),
            (r#"{"id":"a","posts":[{"text":"x"}]"#, "malformed"),
        ];
        for (line, needle) in cases {
            let err = parse_conversation(line).unwrap_err().to_string();
            assert!(err.contains(needle), "{line} -> {err}");
        }
    }

    #[test]
    fn metadata_fields_are_ignored() {
        let line = r#"{"id":"m","label":"rumor","posts":[{"text":"A","parent":null,"time":"2020","user":"u1"}],"extra":1}"#;
        let conv = parse_conversation(line).unwrap();
        assert_eq!(conv.label.as_deref(), Some("rumor"));
    }

    #[test]
    fn stats_on_small_sets() {
        let chain = ClaimConversation::new(
            "c",
            vec![Post::root("a"), Post::reply("b", 0), Post::reply("c", 1)],
            None,
        )
        .unwrap();
        let single = ClaimConversation::new("s", vec![Post::root("a")], None).unwrap();
        let stats = tree_stats(&ConversationDataset::new(vec![chain.clone()]).unwrap()).unwrap();
        assert_eq!(stats.mean_posts, 3.0);
        assert_eq!(stats.max_depth, 2);
        let stats = tree_stats(&ConversationDataset::new(vec![single, chain]).unwrap()).unwrap();
        assert_eq!(stats.mean_posts, 2.0);
        assert_eq!(stats.max_posts, 3);
        assert!(tree_stats(&ConversationDataset::default()).is_err());
    }

    #[test]
    fn mixed_labels_rejected() {
        let a = ClaimConversation::new("a", vec![Post::root("x")], Some("t".into())).unwrap();
        let b = ClaimConversation::new("b", vec![Post::root("x")], None).unwrap();
        assert!(ConversationDataset::new(vec![a, b]).is_err());
    }

    #[test]
    fn subsample_keeps_connected_subtree() {
        let mut posts = vec![Post::root("r")];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 1..300 {
            posts.push(Post::reply(format!("p{i}"), rng.random_range(0..i)));
        }
        let conv = ClaimConversation::new("big", posts, None).unwrap();
        let sub = conv.subsample(128, &mut rng);
        assert_eq!(sub.len(), 128);
        assert_eq!(sub.posts[0].text, "r");
        sub.validate().unwrap();
        assert!(sub.is_canonical());
    }
}
