use pep_core::conversation::{
    canonical_order, parse_conversation, tree_stats, validation_report, ClaimConversation, ConversationDataset, Post,
};
use pep_core::synthetic::{random_parents, tree_from_parents};
use pep_core::ConversationError;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn record(parents: &[Option<i64>]) -> Value {
    let posts: Vec<Value> =
        parents.iter().enumerate().map(|(i, p)| json!({"text": format!("post {i}"), "parent": p})).collect();
    json!({"id": "r", "posts": posts, "created_at": "ignored"})
}

/// Shuffles the file order of a canonical tree, rewriting parent indices.
fn shuffled(parents: &[Option<usize>], rng: &mut ChaCha8Rng) -> Vec<Option<i64>> {
    let n = parents.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pos = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    order.iter().map(|&old| parents[old].map(|p| pos[p] as i64)).collect()
}

#[derive(Debug, Clone, Copy)]
enum Mutation {
    EmptyText,
    Dangling,
    Negative,
    SecondRoot,
    RootGetsParent,
    Cycle,
}

fn mutate(parents: &[Option<usize>], m: Mutation, rng: &mut ChaCha8Rng) -> Option<Value> {
    let n = parents.len();
    let mut p: Vec<Option<i64>> = parents.iter().map(|q| q.map(|v| v as i64)).collect();
    let mut rec;
    match m {
        Mutation::EmptyText => {
            rec = record(&p);
            rec["posts"][rng.random_range(0..n)]["text"] = json!("   ");
            return Some(rec);
        }
        Mutation::Dangling => p[rng.random_range(0..n)] = Some(n as i64 + 2),
        Mutation::Negative => p[rng.random_range(0..n)] = Some(-1),
        Mutation::SecondRoot => {
            if n < 2 {
                return None;
            }
            p[rng.random_range(1..n)] = None;
        }
        Mutation::RootGetsParent => {
            if n < 2 {
                return None;
            }
            p[0] = Some(rng.random_range(1..n) as i64);
        }
        Mutation::Cycle => {
            // a non-root node whose child becomes its parent
            let v = (1..n).find(|&v| parents.contains(&Some(v)))?;
            let child = (0..n).find(|&c| parents[c] == Some(v))?;
            p[v] = Some(child as i64);
        }
    }
    rec = record(&p);
    Some(rec)
}

#[test]
fn each_mutation_maps_to_its_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut seen = [0usize; 6];
    for _ in 0..600 {
        let n = rng.random_range(1..20);
        let parents = random_parents(n, 0.5, &mut rng);
        let all = [
            Mutation::EmptyText,
            Mutation::Dangling,
            Mutation::Negative,
            Mutation::SecondRoot,
            Mutation::RootGetsParent,
            Mutation::Cycle,
        ];
        let k = rng.random_range(0..all.len());
        let Some(rec) = mutate(&parents, all[k], &mut rng) else { continue };
        let err = parse_conversation(&rec.to_string()).unwrap_err();
        let ok = match all[k] {
            Mutation::EmptyText => matches!(err, ConversationError::EmptyText { .. }),
            Mutation::Dangling | Mutation::Negative => matches!(err, ConversationError::DanglingParent { .. }),
            Mutation::SecondRoot => matches!(err, ConversationError::MultipleRoots { .. }),
            Mutation::RootGetsParent => {
                matches!(err, ConversationError::MissingRoot { .. })
            }
            Mutation::Cycle => matches!(err, ConversationError::Cycle { .. }),
        };
        assert!(ok, "{:?} gave {err}", all[k]);
        assert_eq!(err.record_id(), "r");
        seen[k] += 1;
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}

#[test]
fn malformed_records_are_named() {
    let err = parse_conversation(r#"{"id":"bad","posts":[{"text":7,"parent":null}]}"#).unwrap_err();
    assert!(matches!(err, ConversationError::Malformed { .. }));
    assert_eq!(err.record_id(), "bad");
    let err = parse_conversation("not json").unwrap_err();
    assert_eq!(err.record_id(), "<unknown>");
    assert!(matches!(parse_conversation(r#"{"id":"e","posts":[]}"#), Err(ConversationError::NoPosts { .. })));
}

#[test]
fn canonical_order_examples() {
    let star = parse_conversation(
        &json!({"id": "s", "posts": [
            {"text": "a", "parent": 3}, {"text": "b", "parent": 3}, {"text": "c", "parent": 3}, {"text": "root", "parent": null}
        ]})
        .to_string(),
    )
    .unwrap();
    let texts: Vec<&str> = star.texts().collect();
    assert_eq!(texts, ["root", "a", "b", "c"]);
    assert_eq!(star.edges(), vec![(0, 1), (0, 2), (0, 3)]);

    let backwards = parse_conversation(
        &json!({"id": "b", "posts": [
            {"text": "c", "parent": 1}, {"text": "b", "parent": 2}, {"text": "a", "parent": null}
        ]})
        .to_string(),
    )
    .unwrap();
    assert_eq!(backwards.texts().collect::<Vec<_>>(), ["a", "b", "c"]);
    assert_eq!(backwards.edges(), vec![(0, 1), (1, 2)]);
}

#[test]
fn tree_stats_examples() {
    let chain = tree_from_parents("c", &[None, Some(0), Some(1)]);
    let one = tree_from_parents("o", &[None]);
    let stats = tree_stats(&ConversationDataset::new(vec![chain.clone()]).unwrap()).unwrap();
    assert_eq!((stats.mean_posts, stats.max_depth), (3.0, 2));
    let stats = tree_stats(&ConversationDataset::new(vec![one, chain]).unwrap()).unwrap();
    assert_eq!(stats.mean_posts, 2.0);
    assert!(tree_stats(&ConversationDataset::new(vec![]).unwrap()).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trees: Vec<ClaimConversation> =
        (0..100).map(|i| tree_from_parents(format!("t{i}"), &random_parents(rng.random_range(1..40), 0.3, &mut rng))).collect();
    let total: usize = trees.iter().map(|t| t.posts.len()).sum();
    let deepest = trees
        .iter()
        .map(|t| (0..t.len()).map(|mut v| {
            let mut d = 0;
            while let Some(p) = t.posts[v].parent {
                v = p;
                d += 1;
            }
            d
        }).max().unwrap())
        .max()
        .unwrap();
    let stats = tree_stats(&ConversationDataset::new(trees).unwrap()).unwrap();
    assert_eq!(stats.mean_posts, total as f64 / 100.0);
    assert_eq!(stats.max_depth, deepest);
    assert_eq!(stats.depth_histogram.values().sum::<usize>(), 100);
}

#[test]
fn datasets_are_all_or_nothing_labeled() {
    let a = ClaimConversation::new("a", vec![Post::root("x")], Some("rumor".into())).unwrap();
    let b = ClaimConversation::new("b", vec![Post::root("y")], None).unwrap();
    assert!(ConversationDataset::new(vec![a.clone(), b.clone()]).is_err());
    assert!(ConversationDataset::new(vec![a]).unwrap().labeled);
    assert!(!ConversationDataset::new(vec![b]).unwrap().labeled);
}

#[test]
fn files_round_trip_and_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("convs.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trees: Vec<ClaimConversation> =
        (0..20).map(|i| tree_from_parents(format!("t{i}"), &random_parents(rng.random_range(1..12), 0.5, &mut rng))).collect();
    let ds = ConversationDataset::new(trees).unwrap();
    std::fs::write(&path, ds.to_jsonl()).unwrap();
    assert_eq!(ConversationDataset::load(&path).unwrap().conversations, ds.conversations);

    let body = format!("{}\n\n{{\"id\":\"x\",\"posts\":[]}}\nnot json\n", ds.to_jsonl().lines().next().unwrap());
    std::fs::write(&path, body).unwrap();
    let err = ConversationDataset::load(&path).unwrap_err().to_string();
    assert!(err.contains(":3:"), "{err}");
    let report = validation_report(&path).unwrap();
    assert_eq!(report.len(), 2);
    assert!(report[0].starts_with("line 3:") && report[1].starts_with("line 4:"));
}

proptest! {
    #[test]
    fn parsing_any_file_order_yields_a_canonical_tree(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = random_parents(n, 0.4, &mut rng);
        let tree = parse_conversation(&record(&shuffled(&parents, &mut rng)).to_string()).unwrap();
        prop_assert!(tree.is_canonical());
        prop_assert_eq!(tree.len(), n);
        prop_assert_eq!(canonical_order(&tree), tree.clone());
        let mut depth_counts = vec![0usize; n];
        for d in tree.depths() {
            depth_counts[d] += 1;
        }
        let original = tree_from_parents("r", &parents);
        let mut expect = vec![0usize; n];
        for d in original.depths() {
            expect[d] += 1;
        }
        prop_assert_eq!(depth_counts, expect);
    }

    #[test]
    fn subsampling_keeps_a_connected_canonical_subtree(seed in any::<u64>(), n in 1usize..60, cap in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = tree_from_parents("t", &random_parents(n, 0.4, &mut rng));
        let sub = tree.subsample(cap, &mut rng);
        prop_assert_eq!(sub.len(), n.min(cap));
        prop_assert!(sub.is_canonical());
        prop_assert!(sub.validate().is_ok());
        prop_assert_eq!(&sub.posts[0], &tree.posts[0]);
    }
}
