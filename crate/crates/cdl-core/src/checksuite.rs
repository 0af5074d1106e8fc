//! The registered gradient-verification suite: every tape primitive at
//! 1e-5, every loss at 1e-4, and the full combined student loss at 1e-3,
//! all against central finite differences.

use crate::data::{Dataset, DatasetSpec};
use crate::distill::{dkd_loss, fitnets_loss, kd_loss, reviewkd_loss, DistillConfig, DistillMethod, FeatureMapping};
use crate::error::Result;
use crate::gradcheck::{finite_difference_check, LossBuilder};
use crate::model::{ContinualModel, FreezeMode, StudentLossCtx, TeacherOutputs};
use crate::params::ParamStore;
use crate::pools::{PoolSpec, PromptPool};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{HeadRole, ViTConfig};

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const LOSS_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn run_check(
    name: &str,
    tolerance: f64,
    store: &mut ParamStore,
    builder: &mut LossBuilder,
    eps: f64,
) -> Result<CheckOutcome> {
    let report = finite_difference_check(builder, store, eps)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        tolerance,
        pass: report.max_rel_err <= tolerance,
    })
}

fn rand_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.insert(*name, Tensor::rand_uniform(shape, -2.0, 2.0, &mut rng), true);
    }
    store
}

/// Runs every registered check. `corrupt` names a check whose parameters are
/// shifted between the analytic and numeric passes, which makes the
/// comparison fail; it exists to prove the suite reports failures by name.
pub fn gradient_suite(corrupt: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // ── primitives ──────────────────────────────────────────────────
    {
        let mut store = rand_store(&[("a", &[3, 4]), ("b", &[4, 5])], 1);
        let (a, b) = (store.get("a")?, store.get("b")?);
        out.push(run_check("primitive/matmul", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let (ai, bi) = (t.param(s, a), t.param(s, b));
            let c = t.matmul(ai, bi);
            Ok(t.mean_all(c))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("a", &[3, 4]), ("b", &[5, 4])], 2);
        let (a, b) = (store.get("a")?, store.get("b")?);
        out.push(run_check("primitive/matmul_nt", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let (ai, bi) = (t.param(s, a), t.param(s, b));
            let c = t.matmul_nt(ai, bi);
            Ok(t.mean_all(c))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("a", &[2, 6]), ("b", &[2, 6]), ("bias", &[6]), ("s", &[1])], 3);
        let (a, b) = (store.get("a")?, store.get("b")?);
        let (bias, sc) = (store.get("bias")?, store.get("s")?);
        out.push(run_check("primitive/add_mul_bias_scale", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let (ai, bi) = (t.param(s, a), t.param(s, b));
            let (bias_id, sc_id) = (t.param(s, bias), t.param(s, sc));
            let sum = t.add(ai, bi);
            let prod = t.mul(sum, ai);
            let biased = t.add_bias(prod, bias_id);
            let scaled = t.mul_scalar(biased, sc_id);
            let aff = t.affine(scaled, 0.7, -0.1);
            Ok(t.mean_all(aff))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], 4);
        let (x, gm, bt) = (store.get("x")?, store.get("g")?, store.get("b")?);
        out.push(run_check("primitive/layer_norm", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let y = {
                let (xi, gi, bi) = (t.param(s, x), t.param(s, gm), t.param(s, bt));
                t.layer_norm(xi, gi, bi, 1e-6)
            };
            let sq = t.mul(y, y);
            Ok(t.mean_all(sq))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("x", &[2, 5])], 5);
        let x = store.get("x")?;
        out.push(run_check("primitive/gelu", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let xi = t.param(s, x);
            let y = t.gelu(xi);
            Ok(t.mean_all(y))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("x", &[3, 4]), ("w", &[3, 4])], 6);
        let (x, w) = (store.get("x")?, store.get("w")?);
        out.push(run_check("primitive/softmax", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let xi = t.param(s, x);
            let y = t.softmax(xi);
            let wi = t.param(s, w);
            let weighted = t.mul(y, wi);
            Ok(t.sum_all(weighted))
        }, 1e-5)?);
    }
    {
        let mut rng = SeededRng::new(7);
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::rand_uniform(&[4], 0.5, 2.5, &mut rng), true);
        let z = store.insert("z", Tensor::rand_uniform(&[4], -2.0, 2.0, &mut rng), true);
        out.push(run_check("primitive/sqrt_sigmoid", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let r = {
                let xi = t.param(s, x);
                t.sqrt(xi)
            };
            let sg = {
                let zi = t.param(s, z);
                t.sigmoid(zi)
            };
            let prod = t.mul(r, sg);
            Ok(t.mean_all(prod))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("a", &[2, 4]), ("b", &[3, 4]), ("c", &[5, 2])], 8);
        let (a, b, c) = (store.get("a")?, store.get("b")?, store.get("c")?);
        out.push(run_check("primitive/concat_slice_reshape", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let (ai, bi, ci) = (t.param(s, a), t.param(s, b), t.param(s, c));
            let rows = t.concat_rows(&[ai, bi]);
            let cols = t.concat_cols(&[rows, ci]);
            let r = t.slice_rows(cols, 1, 3);
            let rc = t.slice_cols(r, 2, 3);
            let flat = t.reshape(rc, &[9]);
            let sq = t.mul(flat, flat);
            Ok(t.mean_all(sq))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("x", &[6])], 9);
        let x = store.get("x")?;
        out.push(run_check("primitive/gather_mask_cross_entropy", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let xi = t.param(s, x);
            let masked = t.mask_set(xi, &[true, true, false, true, false, true], -1e9);
            let picked = t.gather(masked, &[0, 1, 3, 5]);
            Ok(t.cross_entropy(picked, 1))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("a", &[5]), ("b", &[5])], 10);
        let (a, b) = (store.get("a")?, store.get("b")?);
        out.push(run_check("primitive/kl_divergence", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let p = {
                let ai = t.param(s, a);
                t.softmax(ai)
            };
            let q = {
                let bi = t.param(s, b);
                t.softmax(bi)
            };
            Ok(t.kl_div(p, q))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("a", &[4]), ("b", &[4])], 11);
        let (a, b) = (store.get("a")?, store.get("b")?);
        out.push(run_check("primitive/mse_cosine", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let (ai, bi) = (t.param(s, a), t.param(s, b));
            let m = t.mse(ai, bi);
            let c = t.cosine_sim(ai, bi)?;
            Ok(t.add(m, c))
        }, 1e-5)?);
    }
    {
        let mut store = rand_store(&[("q", &[3, 8]), ("k", &[5, 8]), ("v", &[5, 8]), ("w", &[3, 8])], 12);
        let (q, k) = (store.get("q")?, store.get("k")?);
        let (v, w) = (store.get("v")?, store.get("w")?);
        out.push(run_check("primitive/attention_core", PRIMITIVE_TOL, &mut store, &mut |s, t| {
            let (qi, ki, vi) = (t.param(s, q), t.param(s, k), t.param(s, v));
            let o = t.attn_core(qi, ki, vi, 2);
            let wi = t.param(s, w);
            let weighted = t.mul(o, wi);
            Ok(t.sum_all(weighted))
        }, 1e-5)?);
    }

    // ── losses ──────────────────────────────────────────────────────
    {
        let mut rng = SeededRng::new(20);
        let teacher = Tensor::rand_uniform(&[6], -2.0, 2.0, &mut rng);
        let mut store = rand_store(&[("z", &[6])], 21);
        let z = store.get("z")?;
        let t_ref = teacher.clone();
        out.push(run_check("loss/kd_soft_target", LOSS_TOL, &mut store, &mut move |s, t| {
            let zi = t.param(s, z);
            kd_loss(t, zi, &t_ref, 2.0)
        }, 1e-5)?);

        let mut store = rand_store(&[("z", &[6])], 22);
        let z = store.get("z")?;
        let t_ref = teacher.clone();
        out.push(run_check("loss/dkd_decoupled", LOSS_TOL, &mut store, &mut move |s, t| {
            let zi = t.param(s, z);
            let (tc, nc) = dkd_loss(t, zi, &t_ref, 2, 2.0)?;
            Ok(t.add(tc, nc))
        }, 1e-5)?);
    }
    {
        let mut rng = SeededRng::new(23);
        let mut store = ParamStore::new();
        let f1 = store.insert("f1", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng), true);
        let f2 = store.insert("f2", Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng), true);
        let maps = vec![
            FeatureMapping::init("m0", 4, 6, &mut store, &mut rng),
            FeatureMapping::init("m1", 4, 6, &mut store, &mut rng),
        ];
        let gate = store.insert("gate0", Tensor::scalar(0.2), true);
        let t1 = Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut rng);
        let t2 = Tensor::rand_uniform(&[3, 6], -1.0, 1.0, &mut rng);
        out.push(run_check("loss/fitnets_hint", LOSS_TOL, &mut store, &mut |s, t| {
            let s2 = t.param(s, f2);
            fitnets_loss(t, s, s2, &t2, &maps[1], true)
        }, 1e-5)?);
        out.push(run_check("loss/review_fusion", LOSS_TOL, &mut store, &mut |s, t| {
            let s1 = t.param(s, f1);
            let s2 = t.param(s, f2);
            reviewkd_loss(t, s, &[s1, s2], &[&t1, &t2], &maps, &[gate], true)
        }, 1e-5)?);
    }
    {
        // pool losses: the key-pulling tail and the orthogonality tail
        let mut rng = SeededRng::new(24);
        let mut store = ParamStore::new();
        let pool = PromptPool::init(
            PoolSpec::L2P { m: 4, top_k: 2, prompt_len: 4, layers: vec![0] },
            4,
            4,
            "pool",
            &mut store,
            &mut rng,
        )?;
        let q = Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng);
        out.push(run_check("loss/key_match_tail", LOSS_TOL, &mut store, &mut |s, t| {
            pool.key_loss_tape(t, s, &q, &[0, 2], true)
        }, 1e-5)?);

        let mut store = ParamStore::new();
        let pool = PromptPool::init(
            PoolSpec::Coda { m: 3, prompt_len: 4, layers: vec![0], tasks: 3 },
            4,
            4,
            "pool",
            &mut store,
            &mut rng,
        )?;
        let q2 = Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng);
        out.push(run_check("loss/orthogonality_tail", LOSS_TOL, &mut store, &mut |s, t| {
            let alphas = pool.coda_weights_tape(t, s, &q2, true)?;
            let composed = pool.coda_compose_tape(t, s, &alphas, true)?;
            let spread = t.mean_all(composed);
            let orth = pool.coda_orth_loss_tape(t, s, true)?;
            Ok(t.add(spread, orth))
        }, 1e-5)?);
    }

    // ── full composite ──────────────────────────────────────────────
    for (name, method) in [
        ("composite/student_loss_kdp", DistillMethod::Kdp),
        ("composite/student_loss_kd", DistillMethod::Kd),
        ("composite/student_loss_review", DistillMethod::ReviewKd),
    ] {
        let (model, teacher_out, image) = composite_fixture(method)?;
        let cfg = DistillConfig::new(method);
        let q = model.query(0, &image)?;
        let mut store = model.store.clone();
        let active = vec![true, true, false, false];
        let scope = vec![0usize, 1];
        out.push(run_check(name, COMPOSITE_TOL, &mut store, &mut |s, t| {
            let ctx = StudentLossCtx {
                task: 0,
                active: &active,
                scope: &scope,
                teacher: Some(&teacher_out),
                cfg: &cfg,
            };
            Ok(model.student_loss_with(t, s, &q, &image, 0, &ctx)?.total)
        }, 1e-4)?);
    }

    // ── corruption fixture ──────────────────────────────────────────
    if let Some(name) = corrupt {
        out.push(corrupted_fixture(name)?);
    }
    Ok(out)
}

/// A deliberately failing entry: the analytic gradient is taken at one point
/// and the central differences at a shifted point, so the suite must flag
/// the named check.
fn corrupted_fixture(name: &str) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(99);
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng), true);
    let x = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);

    let eval = |store: &ParamStore| -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let wi = tape.param(store, w);
        let xi = tape.constant(&x);
        let prod = tape.mul(wi, xi);
        let sq = tape.mul(prod, prod);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.get(w).unwrap().clone()))
    };
    let (_, analytic) = eval(&store)?;

    // corruption: parameters drift before the numeric pass
    let shifted: Vec<f64> = store.value(w).data().iter().map(|v| v + 0.05).collect();
    store.set_value(w, Tensor::from_vec(vec![3], shifted));

    let eps = 1e-5;
    let base = store.value(w).clone();
    let mut worst = 0.0f64;
    for i in 0..3 {
        let mut plus = base.data().to_vec();
        plus[i] += eps;
        store.set_value(w, Tensor::from_vec(vec![3], plus));
        let (lp, _) = eval(&store)?;
        let mut minus = base.data().to_vec();
        minus[i] -= eps;
        store.set_value(w, Tensor::from_vec(vec![3], minus));
        let (lm, _) = eval(&store)?;
        store.set_value(w, base.clone());
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs())));
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: PRIMITIVE_TOL,
        pass: worst <= PRIMITIVE_TOL,
    })
}

/// A two-block model over 4x4 single-channel images for the combined-loss
/// checks.
fn composite_fixture(method: DistillMethod) -> Result<(ContinualModel, TeacherOutputs, Tensor)> {
    let vit = ViTConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 8,
        key_dim: 8,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        class_capacity: 4,
    };
    let teacher_vit = ViTConfig { embed_dim: 12, key_dim: 12, blocks: 3, heads: 2, ..vit.clone() };
    let mut rng = SeededRng::new(31);
    let mut pre = ParamStore::new();
    let backbone = crate::vit::Backbone::init(vit.clone(), &mut pre, &mut rng)?;
    let _ = backbone;
    let cfg = DistillConfig::new(method);
    let model = ContinualModel::assemble(
        "fixture",
        vit.clone(),
        PoolSpec::Coda { m: 4, prompt_len: 4, layers: vec![0, 1], tasks: 2 },
        &pre,
        HeadRole::Student,
        Some((&cfg, &teacher_vit)),
        FreezeMode::All,
        &mut rng,
    )?;
    let mut trng = SeededRng::new(32);
    let logits: Vec<f64> = (0..4).map(|_| trng.uniform(-1.5, 1.5)).collect();
    let mut features = std::collections::HashMap::new();
    for b in 0..teacher_vit.blocks {
        features.insert(b, Tensor::rand_uniform(&[5, 12], -1.0, 1.0, &mut trng));
    }
    let image = Tensor::rand_uniform(&[1, 4, 4], 0.0, 1.0, &mut trng);
    Ok((model, TeacherOutputs { logits, features }, image))
}

/// Quick self-test dataset so the CLI check command can also exercise the
/// data pipeline determinism cheaply.
pub fn dataset_self_check() -> Result<bool> {
    let spec = DatasetSpec {
        classes: 4,
        pretrain_classes: 2,
        image_size: 8,
        channels: 1,
        train_per_class: 4,
        test_per_class: 2,
        ..DatasetSpec::default()
    };
    let a = Dataset::generate(&spec)?;
    let b = Dataset::generate(&spec)?;
    Ok(a.samples.iter().zip(&b.samples).all(|(x, y)| x.pixels == y.pixels))
}
