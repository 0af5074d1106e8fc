//! Pool mechanics against exhaustive oracles: selection, routing, attended
//! weights, composition linearity, orthogonality penalties, and gradients.

use cdl_core::gradcheck::finite_difference_check;
use cdl_core::pools::{orthogonality_loss, PoolCtx, PoolMethod, PoolSpec, PromptPool};
use cdl_core::tensor::cosine;
use cdl_core::{ParamStore, SeededRng, Tape, Tensor};

const TRAIN: PoolCtx = PoolCtx { train: true, task_id: Some(0) };

fn build(spec: PoolSpec, key_dim: usize, d: usize, seed: u64) -> (PromptPool, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    let pool = PromptPool::init(spec, key_dim, d, "pool", &mut store, &mut rng).unwrap();
    (pool, store)
}

fn set_key(pool_store: &mut ParamStore, name: &str, v: Vec<f64>) {
    let id = pool_store.find(name).unwrap();
    let n = v.len();
    pool_store.set_value(id, Tensor::from_vec(vec![n], v));
}

#[test]
fn l2p_select_prefers_exact_match() {
    let spec = PoolSpec::L2P { m: 4, top_k: 1, prompt_len: 4, layers: vec![0] };
    let (pool, mut store) = build(spec, 4, 4, 1);
    // key 2 equals the query, the others are orthogonal to it
    set_key(&mut store, "pool/l2p/key0", vec![0.0, 1.0, 0.0, 0.0]);
    set_key(&mut store, "pool/l2p/key1", vec![0.0, 0.0, 1.0, 0.0]);
    set_key(&mut store, "pool/l2p/key2", vec![1.0, 0.0, 0.0, 0.0]);
    set_key(&mut store, "pool/l2p/key3", vec![0.0, 0.0, 0.0, 1.0]);
    let sel = pool.l2p_select(&store, &[1.0, 0.0, 0.0, 0.0], 1).unwrap();
    assert_eq!(sel.indices, vec![2]);
}

#[test]
fn l2p_tie_breaks_to_lowest_index() {
    let spec = PoolSpec::L2P { m: 3, top_k: 1, prompt_len: 4, layers: vec![0] };
    let (pool, mut store) = build(spec, 2, 4, 2);
    set_key(&mut store, "pool/l2p/key0", vec![0.0, 1.0]);
    set_key(&mut store, "pool/l2p/key1", vec![1.0, 0.0]);
    set_key(&mut store, "pool/l2p/key2", vec![1.0, 0.0]); // identical to key1
    let sel = pool.l2p_select(&store, &[1.0, 0.0], 1).unwrap();
    assert_eq!(sel.indices, vec![1]);
}

#[test]
fn l2p_select_matches_exhaustive_argsort() {
    let spec = PoolSpec::L2P { m: 5, top_k: 3, prompt_len: 4, layers: vec![0] };
    let (pool, store) = build(spec, 6, 4, 3);
    let mut rng = SeededRng::new(10);
    for _ in 0..50 {
        let q: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sel = pool.l2p_select(&store, &q, 3).unwrap();
        // brute force: sort all five similarities
        let mut sims: Vec<(usize, f64)> = (0..5)
            .map(|i| {
                let key = store.value(store.find(&format!("pool/l2p/key{i}")).unwrap());
                (i, cosine(&q, key.data()).unwrap())
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut want: Vec<usize> = sims.iter().take(3).map(|(i, _)| *i).collect();
        want.sort_unstable();
        assert_eq!(sel.indices, want);
    }
}

#[test]
fn l2p_select_k_larger_than_pool_is_error() {
    let spec = PoolSpec::L2P { m: 3, top_k: 2, prompt_len: 4, layers: vec![0] };
    let (pool, store) = build(spec, 4, 4, 4);
    assert!(pool.l2p_select(&store, &[1.0, 0.0, 0.0, 0.0], 4).is_err());
}

#[test]
fn selection_is_permutation_stable_in_nonselected_components() {
    let spec = PoolSpec::L2P { m: 6, top_k: 2, prompt_len: 4, layers: vec![0] };
    let (pool, mut store) = build(spec, 4, 4, 5);
    let mut rng = SeededRng::new(11);
    let q: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let sel = pool.l2p_select(&store, &q, 2).unwrap();
    let selected_before: Vec<Vec<f64>> =
        sel.selected_keys.iter().map(|k| k.data().to_vec()).collect();

    // Swap the values of two non-selected keys.
    let non: Vec<usize> = (0..6).filter(|i| !sel.indices.contains(i)).collect();
    let (a, b) = (non[0], non[1]);
    let ka = store.value(store.find(&format!("pool/l2p/key{a}")).unwrap()).clone();
    let kb = store.value(store.find(&format!("pool/l2p/key{b}")).unwrap()).clone();
    set_key(&mut store, &format!("pool/l2p/key{a}"), kb.data().to_vec());
    set_key(&mut store, &format!("pool/l2p/key{b}"), ka.data().to_vec());

    let sel2 = pool.l2p_select(&store, &q, 2).unwrap();
    let selected_after: Vec<Vec<f64>> =
        sel2.selected_keys.iter().map(|k| k.data().to_vec()).collect();
    assert_eq!(selected_before, selected_after, "selected key set must not change");
}

#[test]
fn key_loss_examples() {
    let spec = PoolSpec::L2P { m: 3, top_k: 1, prompt_len: 4, layers: vec![0] };
    let (pool, mut store) = build(spec, 2, 4, 6);
    set_key(&mut store, "pool/l2p/key0", vec![2.0, 0.0]); // parallel to q
    set_key(&mut store, "pool/l2p/key1", vec![0.0, 1.0]); // orthogonal
    let q = [1.0, 0.0];
    assert!(pool.key_loss(&store, &q, &[0]).unwrap().abs() < 1e-12);
    assert!((pool.key_loss(&store, &q, &[1]).unwrap() - 1.0).abs() < 1e-12);

    // random case: sum of (1 - cos) recomputed by hand
    let mut rng = SeededRng::new(12);
    set_key(&mut store, "pool/l2p/key2", (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect());
    let q2: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let got = pool.key_loss(&store, &q2, &[0, 1, 2]).unwrap();
    let want: f64 = (0..3)
        .map(|i| {
            let k = store.value(store.find(&format!("pool/l2p/key{i}")).unwrap());
            1.0 - cosine(&q2, k.data()).unwrap()
        })
        .sum();
    assert!((got - want).abs() < 1e-12);
    assert!(pool.key_loss(&store, &q, &[]).is_err());
}

#[test]
fn dual_routing_train_and_test() {
    let spec = PoolSpec::desk_dual(4, 5);
    let (pool, store) = build(spec, 4, 8, 7);
    let mut rng = SeededRng::new(13);
    let q: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();

    // train time: the task id decides, whatever the query says
    for t in 0..5 {
        let sel = pool
            .dual_route(&store, &q, PoolCtx { train: true, task_id: Some(t) })
            .unwrap();
        assert_eq!(sel.indices, vec![t]);
    }
    // unknown task id at train time is a contract violation
    assert!(pool.dual_route(&store, &q, PoolCtx { train: true, task_id: None }).is_err());

    // test time: exhaustive argmax over the five expert keys
    for _ in 0..50 {
        let q: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sel = pool
            .dual_route(&store, &q, PoolCtx { train: false, task_id: None })
            .unwrap();
        let sims: Vec<f64> = (0..5)
            .map(|i| {
                let k = store.value(store.find(&format!("pool/dual/e_key{i}")).unwrap());
                cosine(&q, k.data()).unwrap()
            })
            .collect();
        let mut best = 0;
        for i in 1..5 {
            if sims[i] > sims[best] {
                best = i;
            }
        }
        assert_eq!(sel.indices, vec![best]);
    }
}

#[test]
fn dual_g_prompt_contribution_is_input_independent() {
    let spec = PoolSpec::desk_dual(4, 3);
    let (pool, store) = build(spec, 4, 8, 8);
    let mut rng = SeededRng::new(14);
    let grab_g_prefix = |q: &[f64]| -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let query = Tensor::from_vec(vec![4], q.to_vec());
        let fwd = pool
            .forward(&mut tape, &store, &query, 4, PoolCtx { train: false, task_id: None })
            .unwrap();
        let (k, v) = fwd.prefixes[0].expect("general prompt covers block 0");
        (tape.value(k).clone(), tape.value(v).clone())
    };
    let q1: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let q2: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let (k1, v1) = grab_g_prefix(&q1);
    let (k2, v2) = grab_g_prefix(&q2);
    assert!(k1.bit_eq(&k2) && v1.bit_eq(&v2));
}

#[test]
fn coda_weight_examples() {
    let spec = PoolSpec::Coda { m: 2, prompt_len: 4, layers: vec![0], tasks: 2 };
    let (pool, mut store) = build(spec, 2, 4, 9);
    set_key(&mut store, "pool/coda/key0", vec![1.0, 0.0]);
    set_key(&mut store, "pool/coda/attn0", vec![1.0, 1.0]);
    let w = pool.coda_weights(&store, &[1.0, 0.0]).unwrap();
    assert!((w[0] - 1.0).abs() < 1e-12, "aligned masked query");

    set_key(&mut store, "pool/coda/key1", vec![1.0, 1.0]);
    set_key(&mut store, "pool/coda/attn1", vec![1.0, 0.0]);
    let w = pool.coda_weights(&store, &[1.0, 1.0]).unwrap();
    assert!((w[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
    assert!((w[1] - 0.70711).abs() < 1e-5);
}

#[test]
fn coda_all_ones_attention_equals_plain_key_matching() {
    for seed in 0..100u64 {
        let spec = PoolSpec::Coda { m: 4, prompt_len: 4, layers: vec![0], tasks: 2 };
        let (pool, mut store) = build(spec, 5, 4, seed);
        for i in 0..4 {
            set_key(&mut store, &format!("pool/coda/attn{i}"), vec![1.0; 5]);
        }
        let mut rng = SeededRng::new(1000 + seed);
        let q: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w = pool.coda_weights(&store, &q).unwrap();
        for i in 0..4 {
            let k = store.value(store.find(&format!("pool/coda/key{i}")).unwrap());
            let plain = cosine(&q, k.data()).unwrap();
            assert!((w[i] - plain).abs() <= 1e-12);
        }
    }
}

#[test]
fn coda_zero_masked_query_is_degenerate() {
    let spec = PoolSpec::Coda { m: 1, prompt_len: 4, layers: vec![0], tasks: 1 };
    let (pool, mut store) = build(spec, 2, 4, 10);
    set_key(&mut store, "pool/coda/attn0", vec![0.0, 1.0]);
    // query lives entirely in the masked-out coordinate
    assert!(pool.coda_weights(&store, &[1.0, 0.0]).is_err());
}

#[test]
fn coda_compose_basis_zero_and_loop_oracle() {
    let spec = PoolSpec::Coda { m: 4, prompt_len: 4, layers: vec![0], tasks: 2 };
    let (pool, store) = build(spec, 4, 6, 11);
    // one-hot picks out exactly one prompt
    let p2 = pool.coda_compose(&store, &[0.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(p2.bit_eq(store.value(store.find("pool/coda/prompt2").unwrap())));
    // zero weights give the zero prompt
    let z = pool.coda_compose(&store, &[0.0; 4]).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    // random weights match an explicit accumulate loop
    let mut rng = SeededRng::new(15);
    let alpha: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let got = pool.coda_compose(&store, &alpha).unwrap();
    let mut want = vec![0.0; 4 * 6];
    for (i, &a) in alpha.iter().enumerate() {
        let p = store.value(store.find(&format!("pool/coda/prompt{i}")).unwrap());
        for (w, v) in want.iter_mut().zip(p.data()) {
            *w += a * v;
        }
    }
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    // weight count must match the pool
    assert!(pool.coda_compose(&store, &[1.0; 3]).is_err());
}

#[test]
fn coda_compose_is_linear() {
    let spec = PoolSpec::Coda { m: 4, prompt_len: 6, layers: vec![0], tasks: 2 };
    let (pool, store) = build(spec, 4, 5, 12);
    let mut rng = SeededRng::new(16);
    for _ in 0..20 {
        let a1: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let a2: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = pool.coda_compose(&store, &sum).unwrap();
        let r1 = pool.coda_compose(&store, &a1).unwrap();
        let r2 = pool.coda_compose(&store, &a2).unwrap();
        for ((l, x), y) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
            assert!((l - (x + y)).abs() <= 1e-12);
        }
    }
}

#[test]
fn orthogonality_loss_examples() {
    // identity
    assert!(orthogonality_loss(&Tensor::eye(3)).abs() < 1e-12);
    // orthonormal rows of a 2-D rotation
    let th = 0.7f64;
    let rot = Tensor::from_vec(vec![2, 2], vec![th.cos(), -th.sin(), th.sin(), th.cos()]);
    assert!(orthogonality_loss(&rot) < 1e-12);
    // hand value: [[1,0],[1,0]] -> ||[[0,1],[1,0]]||_F = sqrt(2)
    let b = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
    let got = orthogonality_loss(&b);
    assert!((got - std::f64::consts::SQRT_2).abs() < 1e-12);
    assert!((got - 1.41421).abs() < 1e-5);
}

#[test]
fn orthogonality_loss_zero_iff_orthonormal() {
    let mut rng = SeededRng::new(17);
    // Gram-Schmidt a random 3x5 into orthonormal rows.
    let mut rows: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    for i in 0..3 {
        for j in 0..i {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            for k in 0..5 {
                rows[i][k] -= d * rows[j][k];
            }
        }
        let n: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in rows[i].iter_mut() {
            *v /= n;
        }
    }
    let flat: Vec<f64> = rows.concat();
    let ortho = Tensor::from_vec(vec![3, 5], flat);
    assert!(orthogonality_loss(&ortho) <= 1e-9);

    for seed in 0..20u64 {
        let mut r = SeededRng::new(100 + seed);
        let b = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut r);
        // random rows are (almost surely) not orthonormal
        assert!(orthogonality_loss(&b) > 1e-9);
    }
}

#[test]
fn pool_loss_dispatch_and_lambda() {
    let spec = PoolSpec::L2P { m: 3, top_k: 2, prompt_len: 4, layers: vec![0] };
    let (pool, store) = build(spec, 4, 4, 18);
    let mut rng = SeededRng::new(19);
    let q: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let sel = pool.l2p_select(&store, &q, 2).unwrap();
    // weight zero kills the term
    assert_eq!(pool.pool_loss(&store, &q, &sel, 0.0).unwrap(), 0.0);
    // weight one is the raw key loss (the default weight)
    let raw = pool.key_loss(&store, &q, &sel.indices).unwrap();
    assert!((pool.pool_loss(&store, &q, &sel, 1.0).unwrap() - raw).abs() < 1e-15);
}

#[test]
fn coda_pool_loss_vanishes_on_orthonormal_components() {
    let spec = PoolSpec::Coda { m: 2, prompt_len: 2, layers: vec![0], tasks: 2 };
    let (pool, mut store) = build(spec, 3, 2, 20);
    // orthonormal rows for prompts (flattened 1x4 rows), keys and attention
    let set = |store: &mut ParamStore, name: &str, shape: Vec<usize>, v: Vec<f64>| {
        let id = store.find(name).unwrap();
        store.set_value(id, Tensor::from_vec(shape, v));
    };
    set(&mut store, "pool/coda/prompt0", vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
    set(&mut store, "pool/coda/prompt1", vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]);
    set(&mut store, "pool/coda/key0", vec![3], vec![1.0, 0.0, 0.0]);
    set(&mut store, "pool/coda/key1", vec![3], vec![0.0, 1.0, 0.0]);
    set(&mut store, "pool/coda/attn0", vec![3], vec![0.0, 0.0, 1.0]);
    set(&mut store, "pool/coda/attn1", vec![3], vec![1.0, 0.0, 0.0]);
    let sel = cdl_core::pools::Selection {
        indices: vec![],
        weights: Some(vec![0.0, 0.0]),
        scores: vec![],
        selected_keys: vec![],
    };
    let loss = pool.pool_loss(&store, &[1.0, 0.0, 0.0], &sel, 1.0).unwrap();
    assert!(loss.abs() < 1e-9, "orthonormal components should have zero penalty, got {loss}");
}

#[test]
fn pool_loss_gradients_pass_finite_difference() {
    // L2P key loss wrt keys.
    let spec = PoolSpec::L2P { m: 4, top_k: 2, prompt_len: 4, layers: vec![0] };
    let (pool, mut store) = build(spec, 4, 4, 21);
    let mut rng = SeededRng::new(22);
    let q = Tensor::from_vec(vec![4], (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect());
    let indices = vec![0, 2];
    let mut builder = |s: &ParamStore, t: &mut Tape| pool.key_loss_tape(t, s, &q, &indices, true);
    let report = finite_difference_check(&mut builder, &mut store, 1e-5).unwrap();
    assert!(report.max_rel_err <= 1e-5, "key loss err {}", report.max_rel_err);

    // Attended pool: orthogonality + weights + composition wrt keys,
    // prompts and attention vectors.
    let spec = PoolSpec::Coda { m: 3, prompt_len: 4, layers: vec![0], tasks: 3 };
    let (pool, mut store) = build(spec, 4, 4, 23);
    let q2 = Tensor::from_vec(vec![4], (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect());
    let mut builder = |s: &ParamStore, t: &mut Tape| {
        let alphas = pool.coda_weights_tape(t, s, &q2, true)?;
        let composed = pool.coda_compose_tape(t, s, &alphas, true)?;
        let spread = t.mean_all(composed);
        let orth = pool.coda_orth_loss_tape(t, s, true)?;
        Ok(t.add(spread, orth))
    };
    let report = finite_difference_check(&mut builder, &mut store, 1e-5).unwrap();
    assert!(report.max_rel_err <= 1e-5, "attended pool err {}", report.max_rel_err);
}

#[test]
fn coda_task_partitions_freeze_previous_tasks() {
    let spec = PoolSpec::Coda { m: 6, prompt_len: 4, layers: vec![0], tasks: 3 };
    let (pool, mut store) = build(spec, 4, 4, 24);
    pool.set_task(&mut store, 1);
    assert_eq!(pool.coda_partition(1), 2..4);
    for i in 0..6 {
        let trainable = store.trainable(store.find(&format!("pool/coda/key{i}")).unwrap());
        assert_eq!(trainable, (2..4).contains(&i), "component {i}");
    }
    // method mismatch guard
    assert_eq!(pool.spec.method(), PoolMethod::Coda);
    assert!(pool.l2p_select(&store, &[1.0, 0.0, 0.0, 0.0], 1).is_err());
}

#[test]
fn forward_covers_configured_layers_only() {
    let spec = PoolSpec::desk_coda(4, 5);
    let (pool, store) = build(spec, 8, 8, 25);
    let mut rng = SeededRng::new(26);
    let q = Tensor::from_vec(vec![8], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect());
    let mut tape = Tape::new();
    let fwd = pool.forward(&mut tape, &store, &q, 4, TRAIN).unwrap();
    assert_eq!(fwd.prefixes.len(), 4);
    for l in 0..4 {
        assert!(fwd.prefixes[l].is_some(), "attended prompts cover the first min(5, n) blocks");
    }
    let (k, v) = fwd.prefixes[0].unwrap();
    assert_eq!(tape.value(k).nrows(), 4); // prompt_len 8 split in half
    assert_eq!(tape.value(v).nrows(), 4);
    assert!(fwd.loss.is_some());
}
