//! Root, branch and parent relation labels derived from a propagation tree.
//!
//! All three relations are symmetric and the diagonal is never supervised.
//! Two posts share a branch exactly when one is an ancestor of the other.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conversation::ClaimConversation;

/// The three pairwise pretraining tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Root,
    Branch,
    Parent,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Root, Task::Branch, Task::Parent];

    pub fn index(self) -> usize {
        match self {
            Task::Root => 0,
            Task::Branch => 1,
            Task::Parent => 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Task::Root => "rop",
            Task::Branch => "brp",
            Task::Parent => "pap",
        }
    }
}

/// Symmetric boolean n×n matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl RelationMatrix {
    pub fn from_predicate(n: usize, pred: impl Fn(usize, usize) -> bool) -> Self {
        let mut entries = vec![false; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = pred(i, j);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Self { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    /// Number of true off-diagonal entries (each unordered pair counted twice).
    pub fn count_true(&self) -> usize {
        self.entries.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.entries
    }

    /// Relabels nodes: entry `(a, b)` of the result is entry `(perm[a], perm[b])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_predicate(self.n, |a, b| self.get(perm[a], perm[b]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrices {
    pub rop: RelationMatrix,
    pub brp: RelationMatrix,
    pub pap: RelationMatrix,
    /// Supervised entries: every off-diagonal pair.
    pub mask: Vec<bool>,
}

impl LabelMatrices {
    pub fn n(&self) -> usize {
        self.rop.n()
    }

    pub fn task(&self, task: Task) -> &RelationMatrix {
        match task {
            Task::Root => &self.rop,
            Task::Branch => &self.brp,
            Task::Parent => &self.pap,
        }
    }

    /// Number of supervised ordered pairs, n(n-1).
    pub fn supervised(&self) -> usize {
        let n = self.n();
        n * n.saturating_sub(1)
    }
}

pub fn derive_root_labels(tree: &ClaimConversation) -> RelationMatrix {
    RelationMatrix::from_predicate(tree.len(), |i, j| i == 0 || j == 0)
}

pub fn derive_branch_labels(tree: &ClaimConversation) -> RelationMatrix {
    let n = tree.len();
    // ancestor[i * n + a] is true when a is a strict ancestor of i
    let mut ancestor = vec![false; n * n];
    for i in 1..n {
        let p = tree.parent(i).expect("canonical tree");
        ancestor[i * n + p] = true;
        for a in 0..p {
            if ancestor[p * n + a] {
                ancestor[i * n + a] = true;
            }
        }
    }
    RelationMatrix::from_predicate(n, |i, j| ancestor[j * n + i] || ancestor[i * n + j])
}

pub fn derive_parent_labels(tree: &ClaimConversation) -> RelationMatrix {
    RelationMatrix::from_predicate(tree.len(), |i, j| {
        tree.parent(j) == Some(i) || tree.parent(i) == Some(j)
    })
}

pub fn derive_all(tree: &ClaimConversation) -> LabelMatrices {
    debug_assert!(tree.is_canonical());
    let n = tree.len();
    let mask = (0..n * n).map(|k| k / n != k % n).collect();
    LabelMatrices {
        rop: derive_root_labels(tree),
        brp: derive_branch_labels(tree),
        pap: derive_parent_labels(tree),
        mask,
    }
}

/// Sparse export: one line `tree_id i j rop brp pap` per unordered pair `i < j`.
pub fn sparse_export(tree_id: &str, labels: &LabelMatrices) -> String {
    let mut out = String::new();
    let flag = |b: bool| if b { 1 } else { 0 };
    for i in 0..labels.n() {
        for j in (i + 1)..labels.n() {
            writeln!(
                out,
                "{tree_id} {i} {j} {} {} {}",
                flag(labels.rop.get(i, j)),
                flag(labels.brp.get(i, j)),
                flag(labels.pap.get(i, j))
            )
            .unwrap();
        }
    }
    out
}
