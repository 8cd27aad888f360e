use ndarray::Array2;
use pep_core::encoder::{
    embed_posts, forward, load_checkpoint, mlm_logits, pairwise_logits, save_checkpoint, EncoderConfig,
    EncoderParams, TrainingState,
};
use pep_core::labels::{derive_all, Task};
use pep_core::Error;
use pep_core::objectives::PepConfig;
use pep_core::synthetic::example_tree;
use pep_core::text::{TokenSequence, CLS_ID, PAD_ID, SEP_ID};
use pep_core::trainer::{objective, BatchSequence, BatchTree, StepBatch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(heads: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads,
        hidden_dim: 8,
        ffn_dim: 12,
        max_positions: 10,
        vocab_size: 15,
        task_proj_dim: 4,
        project_pairs: true,
        init_std: 0.5,
    }
}

/// Perturbs every parameter so that biases and norm gains are not trivial.
fn random_params(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = EncoderParams::init(cfg, &mut rng).unwrap();
    for k in 0..p.num_params() {
        let noise = rng.random_range(-0.3..0.3);
        p.with_scalar_mut(k, |v| *v += noise);
    }
    p
}

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, w: &Array2<f64>) -> Mat {
    a.iter()
        .map(|row| (0..w.ncols()).map(|c| (0..row.len()).map(|k| row[k] * w[[k, c]]).sum()).collect())
        .collect()
}

fn add_bias(a: &mut Mat, b: &ndarray::Array1<f64>) {
    for row in a.iter_mut() {
        for (x, bv) in row.iter_mut().zip(b) {
            *x += bv;
        }
    }
}

fn norm(a: &Mat, gain: &ndarray::Array1<f64>, bias: &ndarray::Array1<f64>) -> Mat {
    a.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            row.iter().enumerate().map(|(c, x)| (x - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c]).collect()
        })
        .collect()
}

/// Scalar-loop encoder: pre-norm blocks, tanh-GELU, final norm.
fn reference_forward(ids: &[u32], p: &EncoderParams) -> Mat {
    let cfg = &p.config;
    let dh = cfg.hidden_dim / cfg.heads;
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| (0..cfg.hidden_dim).map(|c| p.token_embedding[[id as usize, c]] + p.position_embedding[[pos, c]]).collect())
        .collect();
    for l in &p.layers {
        let a = norm(&x, &l.attn_norm_gain, &l.attn_norm_bias);
        let mut q = matmul(&a, &l.wq);
        add_bias(&mut q, &l.bq);
        let mut k = matmul(&a, &l.wk);
        add_bias(&mut k, &l.bk);
        let mut v = matmul(&a, &l.wv);
        add_bias(&mut v, &l.bv);
        let n = ids.len();
        let mut ctx = vec![vec![0.0; cfg.hidden_dim]; n];
        for h in 0..cfg.heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - max).exp() / z;
                    for c in 0..dh {
                        ctx[i][h * dh + c] += w * v[j][h * dh + c];
                    }
                }
            }
        }
        let mut o = matmul(&ctx, &l.wo);
        add_bias(&mut o, &l.bo);
        for (xr, orow) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(orow) {
                *a += b;
            }
        }
        let f = norm(&x, &l.ffn_norm_gain, &l.ffn_norm_bias);
        let mut u = matmul(&f, &l.w1);
        add_bias(&mut u, &l.b1);
        let g: Mat = u
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&t| 0.5 * t * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (t + 0.044715 * t.powi(3))).tanh()))
                    .collect()
            })
            .collect();
        let mut out = matmul(&g, &l.w2);
        add_bias(&mut out, &l.b2);
        for (xr, orow) in x.iter_mut().zip(&out) {
            for (a, b) in xr.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }
    norm(&x, &p.final_norm_gain, &p.final_norm_bias)
}

#[test]
fn forward_matches_reference() {
    for (heads, seed) in [(1, 1), (2, 2), (4, 3)] {
        let p = random_params(&tiny(heads), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for len in 1..=10 {
            let ids: Vec<u32> = (0..len).map(|i| if i == 0 { CLS_ID } else { rng.random_range(7..15) }).collect();
            let out = forward(std::slice::from_ref(&ids), &p).unwrap();
            let expect = reference_forward(&ids, &p);
            for (r, row) in expect.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!((out.hidden[0][[r, c]] - v).abs() < 1e-10, "len {len} ({r},{c})");
                }
            }
            assert_eq!(out.cls.row(0), out.hidden[0].row(0));
        }
    }
}

#[test]
fn padding_does_not_change_outputs() {
    let p = random_params(&tiny(2), 9);
    let short = vec![CLS_ID, 9, 10, SEP_ID];
    let alone = forward(std::slice::from_ref(&short), &p).unwrap();
    let mut padded = short.clone();
    padded.resize(10, PAD_ID);
    let long = vec![CLS_ID, 7, 8, 9, 10, 11, 12, 13, 14, SEP_ID];
    let batch = forward(&[padded, long], &p).unwrap();
    assert_eq!(batch.hidden[0], alone.hidden[0]);
    assert_eq!(batch.cls.row(0), alone.cls.row(0));
}

#[test]
fn zero_parameters_give_identical_embeddings() {
    let p = EncoderParams::zeros(&tiny(2));
    let out = forward(&[vec![CLS_ID, 9, 10, SEP_ID], vec![CLS_ID, 11, 12, SEP_ID]], &p).unwrap();
    assert_eq!(out.cls.row(0), out.cls.row(1));
    let logits = mlm_logits(&out.hidden[0], &p, &[1]).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    assert_eq!(mlm_logits(&out.hidden[0], &p, &[]).unwrap().nrows(), 0);
}

#[test]
fn batch_order_only_permutes_outputs() {
    let p = random_params(&tiny(2), 4);
    let rows = vec![vec![CLS_ID, 8, 9, SEP_ID], vec![CLS_ID, 10, 11, SEP_ID], vec![CLS_ID, 12, 13, SEP_ID]];
    let fwd = forward(&rows, &p).unwrap();
    let rev: Vec<Vec<u32>> = rows.iter().rev().cloned().collect();
    let back = forward(&rev, &p).unwrap();
    for i in 0..3 {
        assert_eq!(fwd.hidden[i], back.hidden[2 - i]);
    }
}

#[test]
fn orthogonal_rows_under_identity_projection() {
    let cfg = EncoderConfig { task_proj_dim: 8, ..tiny(2) };
    let mut p = random_params(&cfg, 1);
    for proj in &mut p.task_projection {
        *proj = Array2::eye(8);
    }
    let h = Array2::from_shape_fn((4, 8), |(i, j)| if i == j { (i + 1) as f64 } else { 0.0 });
    let s = pairwise_logits(h.view(), &p, Task::Branch);
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert_eq!(s[[i, j]], 0.0);
            }
        }
    }
    assert_eq!(pairwise_logits(h.slice(ndarray::s![..1, ..]), &p, Task::Root).dim(), (1, 1));
}

#[test]
fn rejects_bad_input() {
    let p = random_params(&tiny(2), 1);
    assert!(forward(&[vec![CLS_ID, 99]], &p).is_err());
    assert!(forward(&[vec![CLS_ID; 11]], &p).is_err());
    assert!(forward(&[vec![CLS_ID, 8], vec![CLS_ID]], &p).is_err());
    let h = forward(&[vec![CLS_ID, 8]], &p).unwrap().hidden.remove(0);
    assert!(mlm_logits(&h, &p, &[2]).is_err());
    assert_eq!(mlm_logits(&h, &p, &[1]).unwrap().dim(), (1, 15));
}

#[test]
fn pairwise_logits_match_scalar_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for project in [true, false] {
        let cfg = EncoderConfig { project_pairs: project, ..tiny(2) };
        let p = random_params(&cfg, 5);
        let h = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        for task in Task::ALL {
            let s = pairwise_logits(h.view(), &p, task);
            let z: Vec<Vec<f64>> = if project {
                let w = &p.task_projection[task.index()];
                (0..6).map(|i| (0..4).map(|k| (0..8).map(|a| h[[i, a]] * w[[a, k]]).sum()).collect()).collect()
            } else {
                (0..6).map(|i| h.row(i).to_vec()).collect()
            };
            for i in 0..6 {
                for j in 0..6 {
                    let dot: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
                    assert!((s[[i, j]] - dot).abs() < 1e-12);
                    assert_eq!(s[[i, j]], s[[j, i]]);
                }
            }
        }
    }
}

#[test]
fn tasks_have_separate_projections() {
    let p = random_params(&tiny(2), 6);
    let h = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 / 10.0);
    assert_ne!(pairwise_logits(h.view(), &p, Task::Root), pairwise_logits(h.view(), &p, Task::Parent));
}

fn grad_batch() -> (Vec<BatchSequence>, pep_core::LabelMatrices) {
    let seqs = (0..9u32)
        .map(|i| {
            let ids = vec![CLS_ID, 7 + i % 5, 8 + i % 3, 4, SEP_ID];
            BatchSequence { ids, positions: vec![3], targets: vec![10 + i % 4] }
        })
        .collect();
    (seqs, derive_all(&example_tree()))
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = EncoderConfig { layers: 1, heads: 2, hidden_dim: 8, ffn_dim: 8, max_positions: 8, vocab_size: 14, task_proj_dim: 4, project_pairs: true, init_std: 0.5 };
    let params = random_params(&cfg, 3);
    assert!(params.num_params() <= 5000);
    let (seqs, labels) = grad_batch();
    let off = PepConfig { mlm: false, rop: false, brp: false, pap: false, ..Default::default() };
    let cases = [
        ("mlm", PepConfig { mlm: true, ..off.clone() }),
        ("rop", PepConfig { rop: true, ..off.clone() }),
        ("brp", PepConfig { brp: true, ..off.clone() }),
        ("pap", PepConfig { pap: true, ..off.clone() }),
        ("combined", PepConfig { alpha: 0.7, beta: 1.3, gamma: 0.9, ..Default::default() }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (name, pep) in cases {
        let batch = StepBatch { sequences: seqs.clone(), trees: vec![BatchTree { sequences: 0..9, labels: &labels }] };
        let g = objective(&params, &batch, &pep, true).unwrap().1.unwrap().flatten();
        for _ in 0..120 {
            let k = rng.random_range(0..params.num_params());
            let h = 1e-5;
            let mut p = params.clone();
            p.with_scalar_mut(k, |v| *v += h);
            let up = objective(&p, &batch, &pep, false).unwrap().0.total;
            p.with_scalar_mut(k, |v| *v -= 2.0 * h);
            let down = objective(&p, &batch, &pep, false).unwrap().0.total;
            let fd = (up - down) / (2.0 * h);
            // the floor keeps roundoff (about 1e-11 at this step) from dominating near-zero gradients
            let rel = (fd - g[k]).abs() / (fd.abs() + g[k].abs()).max(1e-6);
            assert!(rel < 1e-4, "{name} coordinate {k}: numeric {fd:e} analytic {:e}", g[k]);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let p = random_params(&tiny(2), 2);
    let n = p.num_params();
    let state = TrainingState {
        stage: 2,
        step: 17,
        optimizer_step: 40,
        moments: Some(((0..n).map(|i| i as f64 * 1e-3).collect(), (0..n).map(|i| 1.0 / (i + 1) as f64).collect())),
    };
    save_checkpoint(&p, &state, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params, p);
    assert_eq!(back.state, state);
    let bytes = std::fs::read(&path).unwrap();
    save_checkpoint(&back.params, &back.state, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    match load_checkpoint(&path) {
        Err(Error::CheckpointChecksum { block: Some(name) }) => assert!(!name.is_empty()),
        other => panic!("expected a named block failure, got {other:?}"),
    }
    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &versioned).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { found: 7, expected: 1 })));
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_ignore_batch_neighbours(seed in any::<u64>(), n in 1usize..6) {
        let p = random_params(&tiny(2), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let posts: Vec<TokenSequence> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..10);
                TokenSequence::from_ids((0..len).map(|i| if i == 0 { CLS_ID } else { rng.random_range(7..15) }).collect())
            })
            .collect();
        let h = embed_posts(&posts, &p).unwrap();
        for (i, post) in posts.iter().enumerate() {
            let alone = embed_posts(std::slice::from_ref(post), &p).unwrap();
            prop_assert_eq!(h.row(i), alone.row(0));
        }
    }
}
