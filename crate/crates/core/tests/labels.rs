use pep_core::conversation::{canonical_permutation, ClaimConversation, Post};
use pep_core::labels::{derive_all, sparse_export, RelationMatrix, Task};
use pep_core::synthetic::{example_tree, tree_from_parents};
use proptest::prelude::*;

/// Parent chain of `i`, nearest first.
fn chain(parents: &[Option<usize>], mut i: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while let Some(p) = parents[i] {
        out.push(p);
        i = p;
    }
    out
}

fn oracle(parents: &[Option<usize>], task: Task, i: usize, j: usize) -> bool {
    if i == j {
        return false;
    }
    match task {
        Task::Root => parents[i].is_none() || parents[j].is_none(),
        Task::Branch => chain(parents, i).contains(&j) || chain(parents, j).contains(&i),
        Task::Parent => parents[i] == Some(j) || parents[j] == Some(i),
    }
}

fn parents_strategy(max_n: usize) -> impl Strategy<Value = Vec<Option<usize>>> {
    prop::collection::vec(any::<u32>(), 0..max_n).prop_map(|draws| {
        let mut parents = vec![None];
        for (k, d) in draws.into_iter().enumerate() {
            parents.push(Some(d as usize % (k + 1)));
        }
        parents
    })
}

#[test]
fn example_tree_rows() {
    let labels = derive_all(&example_tree());
    let export = sparse_export("fig", &labels);
    let rows: Vec<&str> = export.lines().collect();
    for row in ["fig 0 1 1 1 1", "fig 0 2 1 1 0", "fig 1 2 0 1 1", "fig 1 4 0 1 0", "fig 1 7 0 0 0", "fig 4 7 0 0 0"] {
        assert!(rows.contains(&row), "missing {row}");
    }
    assert_eq!(rows.len(), 36);
}

#[test]
fn matrices_are_symmetric_with_empty_diagonal() {
    let labels = derive_all(&example_tree());
    for task in Task::ALL {
        let m = labels.task(task);
        for i in 0..m.n() {
            assert!(!m.get(i, i));
            for j in 0..m.n() {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }
    assert_eq!(labels.supervised(), 72);
}

#[test]
fn single_post_tree_has_no_pairs() {
    let tree = ClaimConversation::new("one", vec![Post::root("only")], None).unwrap();
    let labels = derive_all(&tree);
    assert_eq!(labels.supervised(), 0);
    assert_eq!(sparse_export("one", &labels), "");
}

#[test]
fn chain_tree_is_all_branch() {
    let parents: Vec<Option<usize>> = (0..6usize).map(|i| i.checked_sub(1)).collect();
    let labels = derive_all(&tree_from_parents("chain", &parents));
    assert_eq!(labels.brp.count_true(), 30);
    assert_eq!(labels.pap.count_true(), 10);
}

#[test]
fn star_tree_root_equals_parent() {
    let parents: Vec<Option<usize>> = (0..7).map(|i| (i > 0).then_some(0)).collect();
    let labels = derive_all(&tree_from_parents("star", &parents));
    assert_eq!(labels.rop, labels.pap);
    assert_eq!(labels.rop, labels.brp);
}

proptest! {
    #[test]
    fn derived_labels_match_parent_chain_oracle(parents in parents_strategy(40)) {
        let tree = tree_from_parents("t", &parents);
        let labels = derive_all(&tree);
        let n = parents.len();
        for task in Task::ALL {
            let expect = RelationMatrix::from_predicate(n, |i, j| oracle(&parents, task, i, j));
            prop_assert_eq!(labels.task(task), &expect);
        }
    }

    #[test]
    fn containment_and_counts(parents in parents_strategy(40)) {
        let tree = tree_from_parents("t", &parents);
        let labels = derive_all(&tree);
        let n = parents.len();
        for i in 0..n {
            for j in 0..n {
                prop_assert!(!labels.rop.get(i, j) || labels.brp.get(i, j));
                prop_assert!(!labels.pap.get(i, j) || labels.brp.get(i, j));
            }
        }
        let depth_sum: usize = tree.depths().iter().sum();
        prop_assert_eq!(labels.rop.count_true(), 2 * (n - 1));
        prop_assert_eq!(labels.pap.count_true(), 2 * (n - 1));
        prop_assert_eq!(labels.brp.count_true(), 2 * depth_sum);
    }

    #[test]
    fn relabeling_permutes_labels(parents in parents_strategy(20), seed in any::<u64>()) {
        // shuffle non-root ids, then let construction restore a canonical order
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = parents.len();
        let mut order: Vec<usize> = (1..n).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        order.insert(0, 0);
        let mut pos = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            pos[old] = new;
        }
        let posts: Vec<Post> = order
            .iter()
            .map(|&old| Post { text: format!("post {old}"), parent: parents[old].map(|p| pos[p]) })
            .collect();
        let shuffled = ClaimConversation { id: "s".into(), posts, label: None };
        let canonical = ClaimConversation::new("s", shuffled.posts.clone(), None).unwrap();
        prop_assert!(canonical.is_canonical());
        let perm = canonical_permutation(&shuffled);
        let labels = derive_all(&canonical);
        for i in 0..n {
            for j in 0..n {
                // same texts identify the same posts
                let (a, b) = (perm[i], perm[j]);
                prop_assert_eq!(&canonical.posts[i].text, &shuffled.posts[a].text);
                let (oa, ob) = (order[a], order[b]);
                prop_assert_eq!(labels.brp.get(i, j), oracle(&parents, Task::Branch, oa, ob));
                prop_assert_eq!(labels.pap.get(i, j), oracle(&parents, Task::Parent, oa, ob));
            }
        }
    }
}
