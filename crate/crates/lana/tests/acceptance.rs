//! Release gates: nine numbered checks covering gradient correctness, the
//! worked-example oracles, attention invariants, ability recovery, model
//! capacity, the ablation study, ensemble coherence, persistence, and CLI
//! determinism.
//!
//! Every test prints one `criterion N (...): PASS/FAIL — detail` line before
//! asserting, so `cargo test --test acceptance -- --nocapture` produces a
//! complete scorecard. Tolerances and budgets are pinned in the assertions
//! themselves; the fixtures (seeds, sizes, learning rates) are frozen so the
//! gates are reproducible run to run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use lana::cli;
use lana::dataio::{split_by_student, windows, Interaction};
use lana::leveled::{
    cold_start_ability, finetune_layers, fit_rasch, layer_gaussians, membership_probs, topk_fuse,
    weighted_loss, FinetuneConfig, FinetuneScope,
};
use lana::model::{model_forward, AblationFlags, Batch, LanaHyper, LanaParams};
use lana::pivot::{attention, pc_ffn, pivot_linear, pma_attention, AttnMask, PivotWeights};
use lana::simgen::{describe, generate, SimConfig};
use lana::tensor::{finite_diff_check, finite_diff_spot_check, Array, Tape, Tensor};
use lana::training::{
    bce_loss, evaluate, load_checkpoint, predict, save_checkpoint, train, weighted_bce_loss,
    CheckpointMeta, LayerMeta, Prediction, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

/// Prints the scorecard line for one gate, then asserts it.
fn verdict(number: usize, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number} ({name}): {word} — {detail}");
    assert!(pass, "criterion {number} ({name}) failed: {detail}");
}

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Uniform sample that rejection-samples every element to keep a `margin`
/// distance from each listed kink, so central differences never straddle a
/// non-differentiable point.
fn uniform_away(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Array {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() >= margin) {
            data.push(v);
        }
    }
    Array::new(shape.to_vec(), data).unwrap()
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Deterministic interaction log with short gaps (seconds to minutes), so
/// decay exponents stay far from their cap and every path keeps a live
/// gradient. Student ids start at `first_student`.
fn short_gap_records(
    first_student: u32,
    n_students: u32,
    per_student: usize,
    n_questions: u32,
) -> Vec<Interaction> {
    let mut records = Vec::new();
    for s in 0..n_students {
        let mut ts = 1_600_000_000_000_i64 + s as i64 * 10_000_000;
        for i in 0..per_student {
            let q = (s as usize * 7 + i * 3) as u32 % n_questions;
            records.push(Interaction {
                student_id: first_student + s,
                question_id: q,
                part: (q % 7 + 1) as u8,
                timestamp_ms: ts,
                elapsed_ms: 12_000 + (i as u64 % 9) * 3_500,
                correct: (i * 5 + s as usize) % 3 != 0,
                prior_answer_viewed: i % 4 == 0,
            });
            ts += 30_000 + (i as i64 % 5) * 60_000;
        }
    }
    records
}

fn toy_hyper() -> LanaHyper {
    LanaHyper {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        seq_len: 8,
        d_piv: 4,
        n_questions: 20,
        dropout: 0.0,
    }
}

/// Indexes predictions by (student, window, position) for order-insensitive
/// comparisons between prediction lists.
fn keyed(preds: &[Prediction]) -> BTreeMap<(u32, usize, usize), f64> {
    let map: BTreeMap<(u32, usize, usize), f64> = preds
        .iter()
        .map(|p| ((p.student_id, p.window_index, p.position), p.prob))
        .collect();
    assert_eq!(map.len(), preds.len(), "duplicate prediction keys");
    map
}

// ---------------------------------------------------------------------------
// criterion 1 — every differentiable operation matches central differences
// ---------------------------------------------------------------------------

struct GradSuite {
    rows: Vec<(&'static str, usize, f64)>,
}

impl GradSuite {
    fn new() -> Self {
        GradSuite { rows: Vec::new() }
    }

    /// Full-coordinate central-difference check of `f` at `point`, through a
    /// fixed random linear projection of the output so mis-routed gradients
    /// cannot cancel inside a plain sum. Records (name, probed coords, worst
    /// relative error).
    fn check<F>(&mut self, name: &'static str, point: Vec<Array>, f: F)
    where
        F: Fn(&Tape, &[Tensor]) -> lana::Result<Tensor>,
    {
        // Dry run to size the projection.
        let tape = Tape::new();
        let leaves: Vec<Tensor> = point.iter().map(|a| tape.leaf(a.clone(), true)).collect();
        let probe = f(&tape, &leaves).unwrap_or_else(|e| panic!("{name}: {e}"));
        let out_shape = probe.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(9_000 + self.rows.len() as u64);
        let proj = uniform(&mut rng, &out_shape, 0.5, 1.5);

        let coords: usize = point.iter().map(Array::numel).sum();
        let worst = finite_diff_check(
            |tape, xs| f(tape, xs)?.mul(&tape.constant(proj.clone()))?.sum_all(),
            &point,
            1e-5,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        self.rows.push((name, coords, worst));
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut suite = GradSuite::new();

    // -- elementwise and shape primitives ---------------------------------
    let a = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let b = uniform(&mut rng, &[6, 5], -1.0, 1.0);
    suite.check("matmul", vec![a, b], |_, xs| xs[0].matmul(&xs[1]));

    let a = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
    suite.check("bmm", vec![a, b], |_, xs| xs[0].bmm(&xs[1]));

    let a = uniform(&mut rng, &[3, 7], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 7], -1.0, 1.0);
    suite.check("add", vec![a.clone(), b.clone()], |_, xs| xs[0].add(&xs[1]));
    suite.check("sub", vec![a.clone(), b.clone()], |_, xs| xs[0].sub(&xs[1]));
    suite.check("mul", vec![a, b], |_, xs| xs[0].mul(&xs[1]));

    let x = uniform(&mut rng, &[4, 8], -1.0, 1.0);
    let bias = uniform(&mut rng, &[8], -1.0, 1.0);
    suite.check("add_bias", vec![x, bias], |_, xs| xs[0].add_bias(&xs[1]));

    let x = uniform(&mut rng, &[3, 4, 5], -1.0, 1.0);
    let rows = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    suite.check("add_rows", vec![x, rows], |_, xs| xs[0].add_rows(&xs[1]));

    let x = uniform(&mut rng, &[5, 5], -1.0, 1.0);
    let s = uniform(&mut rng, &[1], -1.0, 1.0);
    suite.check("add_scalar_t", vec![x, s], |_, xs| xs[0].add_scalar_t(&xs[1]));

    let x = uniform(&mut rng, &[5, 5], -1.0, 1.0);
    suite.check("scale", vec![x.clone()], |_, xs| xs[0].scale(0.7));
    suite.check("add_const", vec![x.clone()], |_, xs| xs[0].add_const(0.3));
    suite.check("exp", vec![x.clone()], |_, xs| xs[0].exp());
    suite.check("sigmoid", vec![x.clone()], |_, xs| xs[0].sigmoid());
    suite.check("softplus", vec![x], |_, xs| xs[0].softplus());

    let x = uniform(&mut rng, &[5, 5], 0.3, 2.0);
    suite.check("ln", vec![x], |_, xs| xs[0].ln());

    let x = uniform_away(&mut rng, &[5, 5], -1.0, 1.0, &[0.0], 0.05);
    suite.check("relu", vec![x], |_, xs| xs[0].relu());

    let x = uniform_away(&mut rng, &[5, 5], -1.0, 1.0, &[-0.3, 0.4], 0.05);
    suite.check("clamp", vec![x], |_, xs| xs[0].clamp(-0.3, 0.4));

    let x = uniform(&mut rng, &[2, 3, 6], -1.0, 1.0);
    suite.check("softmax_last", vec![x], |_, xs| xs[0].softmax_last());

    let causal = AttnMask::causal(2, 4);
    let mask_bias = causal.bias.clone();
    let x = uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
    suite.check("softmax_masked", vec![x], move |_, xs| xs[0].softmax_masked(&mask_bias));

    let x = uniform(&mut rng, &[3, 4, 5], -1.0, 1.0);
    suite.check("slice", vec![x], |_, xs| xs[0].slice(1, 1, 2));

    let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    suite.check("reshape", vec![x.clone()], |_, xs| xs[0].reshape(&[6, 4]));
    suite.check("permute", vec![x], |_, xs| xs[0].permute(&[2, 0, 1]));

    let x = uniform(&mut rng, &[3, 4, 5], -1.0, 1.0);
    suite.check("sum_axis", vec![x], |_, xs| xs[0].sum_axis(1));
    let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    suite.check("mean_axis", vec![x.clone()], |_, xs| xs[0].mean_axis(0));
    suite.check("sum_all", vec![x.clone()], |_, xs| xs[0].sum_all());
    suite.check("mean_all", vec![x], |_, xs| xs[0].mean_all());

    let x = uniform(&mut rng, &[3, 8], -1.0, 1.0);
    let gamma = uniform(&mut rng, &[8], 0.5, 1.5);
    let beta = uniform(&mut rng, &[8], -0.5, 0.5);
    suite.check("layer_norm", vec![x, gamma, beta], |_, xs| {
        xs[0].layer_norm(&xs[1], &xs[2], 1e-5)
    });

    let p0 = uniform(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let p1 = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let p2 = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    suite.check("concat_last", vec![p0, p1, p2], |tape, xs| {
        tape.concat_last(&[&xs[0], &xs[1], &xs[2]])
    });

    let table = uniform(&mut rng, &[7, 4], -1.0, 1.0);
    let ids: Arc<Vec<usize>> = Arc::new(vec![0, 3, 3, 6, 1, 5]);
    suite.check("embedding", vec![table], move |tape, xs| tape.embedding(&xs[0], ids.clone()));

    // -- pivot and decay primitives ----------------------------------------
    let w = uniform(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let p = uniform(&mut rng, &[5, 2], -1.0, 1.0);
    suite.check("contract3", vec![w, p], |_, xs| xs[0].contract3(&xs[1]));

    let m = uniform(&mut rng, &[5, 3, 4], -1.0, 1.0);
    let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    suite.check("batch_matvec", vec![m, x], |_, xs| xs[0].batch_matvec(&xs[1]));

    let w = uniform(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let x = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    let p = uniform(&mut rng, &[6, 2], -1.0, 1.0);
    suite.check("pivot_apply", vec![w, b, x, p], |_, xs| {
        xs[0].pivot_apply(&xs[1], &xs[2], &xs[3])
    });

    // rho stays in (0.05, 0.5) and distances under 20 minutes, so the decay
    // exponent never reaches the 30-unit cap and the op is smooth everywhere
    // probed.
    let rho = uniform(&mut rng, &[8, 5], 0.05, 0.5);
    let dis = Arc::new(uniform(&mut rng, &[2, 5, 6], 0.0, 20.0));
    suite.check("decay_logits", vec![rho], move |_, xs| xs[0].decay_logits(&dis, 30.0));

    // -- composite operators ------------------------------------------------
    let w = uniform(&mut rng, &[3, 4, 2], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let x = uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let p = uniform(&mut rng, &[2, 4, 2], -1.0, 1.0);
    suite.check("pivot_linear", vec![w, b, x, p], |_, xs| {
        let weights = PivotWeights { w: xs[0].clone(), b: xs[1].clone() };
        pivot_linear(&xs[2], &xs[3], &weights)
    });

    let q = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let k = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let v = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let m = uniform(&mut rng, &[2, 4], -0.5, 0.5);
    let theta = uniform(&mut rng, &[1], -0.5, 0.5);
    let dis = Arc::new(uniform(&mut rng, &[2, 4, 4], 0.0, 15.0));
    let mask = AttnMask::causal(2, 4);
    suite.check("pma_attention", vec![q, k, v, m, theta], move |_, xs| {
        Ok(pma_attention(&xs[0], &xs[1], &xs[2], &dis, &xs[3], &xs[4], &mask)?.context)
    });

    // The rectified block needs its hidden pre-activations clear of zero by
    // more than the probe step; deterministically search seeds until the
    // sampled point has that margin.
    let mut seed = 40u64;
    let point = loop {
        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut prng, &[2, 3, 4], -0.8, 0.8);
        let p = uniform(&mut prng, &[2, 3, 2], -0.8, 0.8);
        let iw = uniform(&mut prng, &[6, 4, 2], -0.8, 0.8);
        let ib = uniform(&mut prng, &[6], -0.8, 0.8);
        let ow = uniform(&mut prng, &[4, 6, 2], -0.8, 0.8);
        let ob = uniform(&mut prng, &[4], -0.8, 0.8);
        let tape = Tape::new();
        let inner =
            PivotWeights { w: tape.leaf(iw.clone(), false), b: tape.leaf(ib.clone(), false) };
        let hidden =
            pivot_linear(&tape.leaf(x.clone(), false), &tape.leaf(p.clone(), false), &inner)
                .unwrap();
        let margin = hidden.data().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        if margin > 0.02 {
            break vec![x, p, iw, ib, ow, ob];
        }
        seed += 1;
    };
    suite.check("pc_ffn (rectified)", point.clone(), |_, xs| {
        let inner = PivotWeights { w: xs[2].clone(), b: xs[3].clone() };
        let outer = PivotWeights { w: xs[4].clone(), b: xs[5].clone() };
        pc_ffn(&xs[0], &xs[1], &inner, &outer, true)
    });
    suite.check("pc_ffn (affine)", point, |_, xs| {
        let inner = PivotWeights { w: xs[2].clone(), b: xs[3].clone() };
        let outer = PivotWeights { w: xs[4].clone(), b: xs[5].clone() };
        pc_ffn(&xs[0], &xs[1], &inner, &outer, false)
    });

    // -- losses --------------------------------------------------------------
    let logits = uniform(&mut rng, &[4, 6], -2.0, 2.0);
    let targets: Vec<f64> = (0..24).map(|i| f64::from(i % 3 == 0)).collect();
    let valid: Vec<bool> = (0..24).map(|i| i % 5 != 0).collect();
    let weights: Vec<f64> = (0..24).map(|i| [1.0, 0.5, 0.0][i % 3]).collect();
    let (t2, v2, w2) = (targets.clone(), valid, weights);
    suite.check("bce_loss", vec![logits.clone()], move |_, xs| {
        bce_loss(&xs[0].sigmoid()?, &t2, &v2)
    });
    suite.check("weighted_bce_loss", vec![logits], move |_, xs| {
        weighted_bce_loss(&xs[0].sigmoid()?, &targets, &w2)
    });

    // -- the full network with its training loss ----------------------------
    // Spot-checked (2 coordinates per parameter tensor) rather than probed
    // exhaustively; the relative-error floor keeps near-zero coordinates from
    // amplifying difference-quotient noise.
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let records = short_gap_records(1, 2, 12, hyper.n_questions as u32);
    let wins = windows(&records, hyper.seq_len).unwrap();
    let refs: Vec<_> = wins.iter().collect();
    let batch = Batch::build(&refs, None, &hyper).unwrap();

    let shapes = LanaParams::expected_shapes(&hyper, &flags);
    let names: Vec<String> = shapes.keys().cloned().collect();
    let mut prng = ChaCha8Rng::seed_from_u64(5150);
    let point: Vec<Array> = shapes.values().map(|s| uniform(&mut prng, s, -0.5, 0.5)).collect();
    let n_tensors = point.len();

    let targets = arr(&[batch.batch_size, batch.seq_len], &batch.targets);
    let weights = arr(&[batch.batch_size, batch.seq_len], &batch.weights);
    let total_weight: f64 = batch.weights.iter().sum();
    let worst = finite_diff_spot_check(
        |tape, leaves| {
            let bound: BTreeMap<String, Tensor> =
                names.iter().cloned().zip(leaves.iter().cloned()).collect();
            let out = model_forward(tape, &bound, &hyper, &flags, &batch, None)?;
            let t = tape.constant(targets.clone());
            let w = tape.constant(weights.clone());
            let one_minus_t = t.scale(-1.0)?.add_const(1.0)?;
            let one_minus_p = out.probs.scale(-1.0)?.add_const(1.0)?;
            let ll = t.mul(&out.probs.ln()?)?.add(&one_minus_t.mul(&one_minus_p.ln()?)?)?;
            ll.mul(&w)?.sum_all()?.scale(-1.0 / total_weight)
        },
        &point,
        3e-4,
        2,
        97,
        1e-7,
    )
    .unwrap();
    suite.rows.push(("model_forward + bce", 2 * n_tensors, worst));

    // -- scorecard -----------------------------------------------------------
    let elapsed = started.elapsed().as_secs_f64();
    let min_coords = suite.rows.iter().map(|r| r.1).min().unwrap();
    let (worst_op, _, worst_err) =
        suite.rows.iter().copied().max_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
    let over: Vec<&str> =
        suite.rows.iter().filter(|r| r.2 >= 1e-5).map(|r| r.0).collect();
    verdict(
        1,
        "gradient suite",
        over.is_empty() && min_coords >= 20 && elapsed < 120.0,
        &format!(
            "{} ops, every op >= {} probed coordinates, worst rel err {:.1e} ({}), {:.1}s \
             (budget 120s){}",
            suite.rows.len(),
            min_coords,
            worst_err,
            worst_op,
            elapsed,
            if over.is_empty() { String::new() } else { format!("; over tolerance: {over:?}") },
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2 — worked-example oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_equation_oracles_reproduce_worked_examples() {
    let mut exact = 0usize;
    let mut toleranced = 0usize;
    let mut worst: f64 = 0.0;
    let mut close = |got: f64, want: f64| {
        let err = (got - want).abs();
        worst = worst.max(err);
        toleranced += 1;
        assert!(err <= 1e-9, "got {got}, want {want} (err {err:.2e})");
    };

    // layer_gaussians: evenly spaced means, variance split across layers.
    let spec = layer_gaussians(0.0, 4.0, 4, 1.0).unwrap();
    assert_eq!(spec.mu, vec![-1.5, -0.5, 0.5, 1.5]);
    assert_eq!(spec.sigma_sq, vec![1.0; 4]);
    exact += 2;

    let spec1 = layer_gaussians(0.3, 2.25, 1, 0.7).unwrap();
    assert_eq!(spec1.mu, vec![0.3]);
    assert_eq!(spec1.sigma_sq, vec![2.25]);
    exact += 2;

    let spec2 = layer_gaussians(0.0, 2.0, 2, 2.0).unwrap();
    assert_eq!(spec2.mu, vec![-1.0, 1.0]);
    assert_eq!(spec2.sigma_sq, vec![1.0, 1.0]);
    exact += 2;

    // membership_probs: equidistant ability splits evenly; one layer takes
    // everything; off-center abilities follow the density ratio.
    assert_eq!(membership_probs(0.0, &spec2).unwrap(), vec![0.5, 0.5]);
    assert_eq!(membership_probs(0.37, &spec1).unwrap(), vec![1.0]);
    exact += 2;
    let p = membership_probs(1.0, &spec2).unwrap();
    let e2 = (-2.0f64).exp();
    close(p[0], e2 / (1.0 + e2));
    close(p[1], 1.0 / (1.0 + e2));

    // weighted_loss: scales a scalar loss by the membership weight.
    let tape = Tape::new();
    let base = tape.leaf(arr(&[1], &[0.6931]), false);
    assert_eq!(weighted_loss(&base, 1.0).unwrap().data(), vec![0.6931]);
    assert_eq!(weighted_loss(&base, 0.0).unwrap().data(), vec![0.0]);
    assert_eq!(weighted_loss(&base, 0.5).unwrap().data(), vec![0.34655]);
    exact += 3;

    // topk_fuse: k=1 returns the top model untouched; equal weights average;
    // unequal weights renormalize over the selected two.
    let a = vec![0.9, 0.2, 0.55, 0.7, 0.05];
    let b = vec![0.1, 0.6, 0.45, 0.3, 0.95];
    let c = vec![0.5, 0.5, 0.5, 0.5, 0.5];
    let two = vec![a.clone(), b.clone()];
    assert_eq!(topk_fuse(&two, &[0.7, 0.3], 1).unwrap(), a);
    exact += 1;
    let mean = topk_fuse(&two, &[0.5, 0.5], 2).unwrap();
    for (got, (x, y)) in mean.iter().zip(a.iter().zip(&b)) {
        assert_eq!(*got, (x + y) / 2.0);
        exact += 1;
    }
    let three = vec![a.clone(), b.clone(), c];
    let fused = topk_fuse(&three, &[0.6, 0.3, 0.1], 2).unwrap();
    for (got, (x, y)) in fused.iter().zip(a.iter().zip(&b)) {
        close(*got, (0.6 * x + 0.3 * y) / 0.9);
    }

    // pivot_linear: scalar case, zero pivot collapsing to the bias, and an
    // identity weight slab passing x through.
    let tape = Tape::new();
    let weights = PivotWeights {
        w: tape.leaf(arr(&[1, 1, 1], &[2.0]), false),
        b: tape.leaf(arr(&[1], &[0.5]), false),
    };
    let y = pivot_linear(
        &tape.leaf(arr(&[1, 1], &[4.0]), false),
        &tape.leaf(arr(&[1, 1], &[3.0]), false),
        &weights,
    )
    .unwrap();
    assert_eq!(y.data(), vec![24.5]);
    exact += 1;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tape = Tape::new();
    let weights = PivotWeights {
        w: tape.leaf(uniform(&mut rng, &[2, 3, 2], -1.0, 1.0), false),
        b: tape.leaf(arr(&[2], &[0.25, -0.75]), false),
    };
    let y = pivot_linear(
        &tape.leaf(uniform(&mut rng, &[4, 3], -1.0, 1.0), false),
        &tape.leaf(arr(&[4, 2], &[0.0; 8]), false),
        &weights,
    )
    .unwrap();
    for row in y.data().chunks(2) {
        assert_eq!(row, [0.25, -0.75]);
        exact += 1;
    }

    let tape = Tape::new();
    // w[:,:,0] = I, w[:,:,1] arbitrary; pivot [1,0] selects the identity.
    let w = arr(&[2, 2, 2], &[1.0, 0.37, 0.0, -0.81, 0.0, 0.55, 1.0, 0.12]);
    let weights = PivotWeights {
        w: tape.leaf(w, false),
        b: tape.leaf(arr(&[2], &[0.0, 0.0]), false),
    };
    let x = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    let y = pivot_linear(
        &tape.leaf(x.clone(), false),
        &tape.leaf(arr(&[3, 2], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), false),
        &weights,
    )
    .unwrap();
    assert_eq!(y.data(), x.data().to_vec());
    exact += 1;

    // pma_attention: zero distances reduce bit-for-bit to plain attention.
    let tape = Tape::new();
    let q = tape.leaf(uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), false);
    let k = tape.leaf(uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), false);
    let v = tape.leaf(uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), false);
    let m = tape.leaf(uniform(&mut rng, &[2, 3], -0.5, 0.5), false);
    let theta = tape.leaf(uniform(&mut rng, &[1], -0.5, 0.5), false);
    let mask = AttnMask::causal(2, 3);
    let zero_dis = Arc::new(arr(&[2, 3, 3], &[0.0; 18]));
    let decayed = pma_attention(&q, &k, &v, &zero_dis, &m, &theta, &mask).unwrap();
    let plain = attention(&q, &k, &v, &mask).unwrap();
    for (x, y) in decayed.weights.data().iter().zip(plain.weights.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
        exact += 1;
    }
    for (x, y) in decayed.context.data().iter().zip(plain.context.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
        exact += 1;
    }

    // pma_attention: one query, two equally scored keys 0 and 10 minutes
    // away, decay rate 0.1 => logits [0, -1].
    let tape = Tape::new();
    let q = tape.leaf(arr(&[1, 1, 2], &[1.0, 0.0]), false);
    let k = tape.leaf(arr(&[1, 2, 2], &[0.0, 0.7, 0.0, -0.4]), false);
    let v = tape.leaf(arr(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
    let m = tape.leaf(arr(&[1, 1], &[0.0]), false);
    // softplus(theta) = 0.1
    let theta = tape.leaf(arr(&[1], &[(0.1f64.exp() - 1.0).ln()]), false);
    let mask = AttnMask { bias: Arc::new(arr(&[1, 1, 2], &[0.0, 0.0])), query_valid: None };
    let dis = Arc::new(arr(&[1, 1, 2], &[0.0, 10.0]));
    let out = pma_attention(&q, &k, &v, &dis, &m, &theta, &mask).unwrap();
    let e1 = (-1.0f64).exp();
    let w = out.weights.data();
    close(w[0], 1.0 / (1.0 + e1));
    close(w[1], e1 / (1.0 + e1));
    let ctx = out.context.data();
    close(ctx[0], 1.0 / (1.0 + e1));
    close(ctx[1], e1 / (1.0 + e1));

    // Same setup with the far key pushed beyond the decay cap: its weight
    // vanishes and the context collapses onto the near value row.
    let dis_far = Arc::new(arr(&[1, 1, 2], &[0.0, 1e9]));
    let far = pma_attention(&q, &k, &v, &dis_far, &m, &theta, &mask).unwrap();
    let w = far.weights.data();
    close(w[0], 1.0);
    close(w[1], 0.0);
    let ctx = far.context.data();
    close(ctx[0], 1.0);
    close(ctx[1], 0.0);

    verdict(
        2,
        "equation oracles",
        worst <= 1e-9,
        &format!(
            "{exact} exact + {toleranced} toleranced checks across six operators, \
             worst |err| {worst:.1e} (tolerance 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3 — attention invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_attention_invariants_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    // (a) Rows are probability distributions over the allowed keys, and
    // excluded keys carry exactly zero weight.
    let (g, s, dh) = (4, 6, 5);
    let tape = Tape::new();
    let q = tape.leaf(uniform(&mut rng, &[g, s, dh], -1.0, 1.0), false);
    let k = tape.leaf(uniform(&mut rng, &[g, s, dh], -1.0, 1.0), false);
    let v = tape.leaf(uniform(&mut rng, &[g, s, dh], -1.0, 1.0), false);
    let m = tape.leaf(uniform(&mut rng, &[g, s], 0.1, 0.6), false);
    let theta = tape.leaf(arr(&[1], &[0.2]), false);
    let mask = AttnMask::causal(g, s);
    let base_dis = uniform(&mut rng, &[g, s, s], 0.0, 20.0);
    let out =
        pma_attention(&q, &k, &v, &Arc::new(base_dis.clone()), &m, &theta, &mask).unwrap();
    let w = out.weights.data();
    let mut worst_row = 0.0f64;
    for gi in 0..g {
        for j in 0..s {
            let row = &w[(gi * s + j) * s..(gi * s + j + 1) * s];
            let sum: f64 = row.iter().sum();
            worst_row = worst_row.max((sum - 1.0).abs());
            for (kk, &wk) in row.iter().enumerate() {
                if kk > j {
                    assert_eq!(wk, 0.0, "masked key ({gi},{j},{kk}) got weight {wk}");
                } else {
                    assert!(wk >= 0.0);
                }
            }
        }
    }
    assert!(worst_row <= 1e-9, "row sums off by {worst_row:.2e}");

    // (b) Zero distances reduce the decayed op to plain masked attention
    // bit-for-bit.
    let zero = Arc::new(arr(&[g, s, s], &vec![0.0; g * s * s]));
    let decayed = pma_attention(&q, &k, &v, &zero, &m, &theta, &mask).unwrap();
    let plain = attention(&q, &k, &v, &mask).unwrap();
    let same_bits = decayed
        .weights
        .data()
        .iter()
        .zip(plain.weights.data())
        .all(|(x, y)| x.to_bits() == y.to_bits())
        && decayed
            .context
            .data()
            .iter()
            .zip(plain.context.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    assert!(same_bits, "zero-distance attention is not bit-identical to the plain op");

    // (c) A key's weight never grows as its distance does; it strictly drops
    // while the decay exponent is below its cap and plateaus after.
    let weight_at = |dis: &Array, gi: usize, j: usize, kk: usize| -> f64 {
        let out = pma_attention(&q, &k, &v, &Arc::new(dis.clone()), &m, &theta, &mask).unwrap();
        out.weights.data()[(gi * s + j) * s + kk]
    };
    let mut monotone_probes = 0;
    for &(gi, j, kk) in &[(0usize, 3usize, 1usize), (1, 5, 0), (2, 4, 4), (3, 2, 2)] {
        let mut prev = weight_at(&base_dis, gi, j, kk);
        let mut first = true;
        for delta in [0.5, 2.0, 10.0, 1e5, 1e9] {
            let mut bumped = base_dis.clone();
            bumped.data_mut()[(gi * s + j) * s + kk] += delta;
            let now = weight_at(&bumped, gi, j, kk);
            assert!(
                now <= prev,
                "weight ({gi},{j},{kk}) grew from {prev} to {now} at distance +{delta}"
            );
            if first {
                assert!(now < prev, "weight ({gi},{j},{kk}) did not drop for a nearby bump");
                first = false;
            }
            prev = now;
            monotone_probes += 1;
        }
    }

    // (d) Causality through the full network: editing the last interaction
    // leaves every earlier prediction bit-identical while moving its own.
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let params = LanaParams::init(&hyper, &flags, 3).unwrap();
    let records = short_gap_records(1, 1, hyper.seq_len, hyper.n_questions as u32);
    let mut edited = records.clone();
    let last = edited.last_mut().unwrap();
    last.question_id = (last.question_id + 7) % hyper.n_questions as u32;
    last.part = (last.question_id % 7 + 1) as u8;

    let before = predict(&params, &hyper, &flags, &windows(&records, hyper.seq_len).unwrap(), 4)
        .unwrap();
    let after = predict(&params, &hyper, &flags, &windows(&edited, hyper.seq_len).unwrap(), 4)
        .unwrap();
    assert_eq!(before.len(), hyper.seq_len);
    assert_eq!(after.len(), hyper.seq_len);
    let mut prefix_exact = true;
    let mut last_moved = false;
    for (x, y) in before.iter().zip(&after) {
        assert_eq!(x.position, y.position);
        if x.position + 1 < hyper.seq_len {
            prefix_exact &= x.prob.to_bits() == y.prob.to_bits();
        } else {
            last_moved = x.prob.to_bits() != y.prob.to_bits();
        }
    }
    assert!(prefix_exact, "an earlier prediction changed after editing the last interaction");
    assert!(last_moved, "the edited position's prediction did not change at all");

    verdict(
        3,
        "attention invariants",
        true,
        &format!(
            "row sums within {worst_row:.1e} of 1, masked keys exactly 0, zero-distance \
             reduction bit-exact, {monotone_probes} monotone distance probes, causal prefix \
             exactly unchanged under a last-step edit"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4 — ability and difficulty recovery on clean synthetic data
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_rasch_recovers_simulated_abilities() {
    let started = Instant::now();
    // Flat abilities (no drift) and no memory boost make the one-parameter
    // logistic model the true generator, up to the guess floor.
    let cfg = SimConfig {
        n_students: 500,
        beta: 0.0,
        drift_per_100: 0.0,
        seed: 11,
        ..SimConfig::default()
    };
    let truth = describe(&cfg).unwrap();
    let records = generate(&cfg).unwrap();
    // Step size stays under the curvature bound 2 / (records_per_student / 4)
    // so the ascent converges instead of oscillating; 600 iterations give it
    // room to settle.
    let fit = fit_rasch(&records, 600, 0.01, 0.01).unwrap();

    let (mut fit_a, mut true_a) = (Vec::new(), Vec::new());
    for (id, a) in &fit.abilities {
        fit_a.push(*a);
        true_a.push(truth.abilities[id]);
    }
    let (mut fit_d, mut true_d) = (Vec::new(), Vec::new());
    for (id, d) in &fit.difficulties {
        fit_d.push(*d);
        true_d.push(truth.difficulties[id]);
    }
    let r_abilities = pearson(&fit_a, &true_a);
    let r_difficulties = pearson(&fit_d, &true_d);
    let elapsed = started.elapsed().as_secs_f64();

    verdict(
        4,
        "Rasch recovery",
        r_abilities >= 0.9 && r_difficulties >= 0.9 && elapsed < 180.0,
        &format!(
            "{} students / {} questions: ability r {:.4}, difficulty r {:.4} \
             (both need >= 0.9), {:.1}s (budget 180s)",
            fit_a.len(),
            fit_d.len(),
            r_abilities,
            r_difficulties,
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5 — the network can memorize a small cohort
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_model_overfits_a_small_cohort() {
    let started = Instant::now();
    let cfg = SimConfig {
        n_students: 20,
        n_questions: 50,
        interactions_mean: 100,
        interactions_jitter: 20,
        guess: 0.0,
        seed: 5,
        ..SimConfig::default()
    };
    let records = generate(&cfg).unwrap();
    let wins = windows(&records, 50).unwrap();

    let hyper = LanaHyper {
        d_model: 48,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        seq_len: 50,
        d_piv: 4,
        n_questions: 50,
        dropout: 0.0,
    };
    let flags = AblationFlags::full();
    let train_cfg = TrainConfig {
        epochs: 30,
        batch_size: 4,
        lr: 3e-3,
        weight_decay: 0.0,
        clip_norm: 1.0,
        seed: 1,
        shuffle: true,
    };
    let mut params = LanaParams::init(&hyper, &flags, 1).unwrap();
    train(&mut params, &hyper, &flags, &wins, None, &[], &train_cfg, |_| true).unwrap();
    let (auc, preds) = evaluate(&params, &hyper, &flags, &wins, 4).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    verdict(
        5,
        "overfit capacity",
        auc >= 0.95 && elapsed < 300.0,
        &format!(
            "training AUC {auc:.4} (needs >= 0.95) over {} predictions after 30 epochs, \
             {elapsed:.0}s (budget 300s)",
            preds.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6 — each modeling idea pays its way on the default simulator
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_ablation_shows_each_component_helps() {
    let started = Instant::now();
    let records = generate(&SimConfig::default()).unwrap();
    let n_questions = records.iter().map(|r| r.question_id).max().unwrap() as usize + 1;
    let (train_recs, valid_recs) = split_by_student(&records, 0.2, 0).unwrap();
    drop(records);
    let train_wins = windows(&train_recs, 50).unwrap();
    let valid_wins = windows(&valid_recs, 50).unwrap();

    let hyper = LanaHyper {
        d_model: 32,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        seq_len: 50,
        d_piv: 4,
        n_questions,
        dropout: 0.0,
    };

    // Abilities for routing come from the training split only; held-out
    // students fall back to the population mean, so no validation labels
    // leak into the ensemble's routing.
    let fit = fit_rasch(&train_recs, 600, 0.01, 0.01).unwrap();
    drop(train_recs);
    drop(valid_recs);
    let mu = fit.mean_ability();
    let var = {
        let vals: Vec<f64> = fit.abilities.values().copied().collect();
        vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64
    };
    let spec = layer_gaussians(mu, var, 4, 1.0).unwrap();

    let base_cfg = |seed: u64| TrainConfig {
        epochs: 2,
        batch_size: 64,
        lr: 2e-3,
        weight_decay: 0.01,
        clip_norm: 1.0,
        seed,
        shuffle: true,
    };
    let ft_cfg = |seed: u64| FinetuneConfig {
        train: TrainConfig { epochs: 1, ..base_cfg(seed) },
        threshold: 0.01,
        scope: FinetuneScope::Full,
        workers: 1,
    };

    let fit_model = |flags: &AblationFlags, seed: u64| -> LanaParams {
        let mut params = LanaParams::init(&hyper, flags, seed).unwrap();
        train(&mut params, &hyper, flags, &train_wins, None, &[], &base_cfg(seed), |_| true)
            .unwrap();
        params
    };

    let baseline = AblationFlags::baseline();
    let singles = [
        ("base modifications", AblationFlags { no_bm: false, no_pma: true, no_pcffn: true }),
        ("decay attention", AblationFlags { no_bm: true, no_pma: false, no_pcffn: true }),
        ("pivot feed-forward", AblationFlags { no_bm: true, no_pma: true, no_pcffn: false }),
    ];

    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    let seeds = [1u64, 2, 3];
    for &seed in &seeds {
        let base = fit_model(&baseline, seed);
        let auc_base = evaluate(&base, &hyper, &baseline, &valid_wins, 64).unwrap().0;
        *sums.entry("baseline").or_default() += auc_base;

        let ens =
            finetune_layers(&base, &hyper, &baseline, &spec, &fit, &train_wins, &ft_cfg(seed))
                .unwrap();
        let auc_ll = ens.evaluate(&valid_wins, 2, 64).unwrap().0;
        *sums.entry("leveled learning").or_default() += auc_ll;
        drop(ens);
        drop(base);

        for (name, flags) in &singles {
            let params = fit_model(flags, seed);
            let auc = evaluate(&params, &hyper, flags, &valid_wins, 64).unwrap().0;
            *sums.entry(name).or_default() += auc;
        }

        let full_flags = AblationFlags::full();
        let full_base = fit_model(&full_flags, seed);
        let ens =
            finetune_layers(&full_base, &hyper, &full_flags, &spec, &fit, &train_wins, &ft_cfg(seed))
                .unwrap();
        let auc_full = ens.evaluate(&valid_wins, 2, 64).unwrap().0;
        *sums.entry("full").or_default() += auc_full;

        println!(
            "  seed {seed}: baseline {auc_base:.4}, leveled {auc_ll:.4}, full {auc_full:.4}"
        );
    }

    let mean = |name: &str| sums[name] / seeds.len() as f64;
    let base_mean = mean("baseline");
    let full_mean = mean("full");
    let mut detail = format!("mean over {} seeds: baseline {base_mean:.4}", seeds.len());
    let mut pass = full_mean >= base_mean + 0.01;
    for name in ["base modifications", "decay attention", "pivot feed-forward", "leveled learning"]
    {
        let m = mean(name);
        pass &= m >= base_mean - 0.002;
        detail.push_str(&format!(", {name} {m:.4} ({:+.4})", m - base_mean));
    }
    let elapsed = started.elapsed().as_secs_f64();
    detail.push_str(&format!(
        ", full {full_mean:.4} ({:+.4}, needs >= +0.0100); {:.0}s (budget 5400s)",
        full_mean - base_mean,
        elapsed
    ));
    verdict(6, "ablation study", pass && elapsed < 5400.0, &detail);
}

// ---------------------------------------------------------------------------
// criterion 7 — the leveled ensemble is internally coherent
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_leveled_ensemble_is_coherent() {
    let cfg = SimConfig {
        n_students: 30,
        n_questions: 40,
        interactions_mean: 60,
        interactions_jitter: 10,
        seed: 9,
        ..SimConfig::default()
    };
    let records = generate(&cfg).unwrap();
    let wins = windows(&records, 16).unwrap();
    let hyper = LanaHyper {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        seq_len: 16,
        d_piv: 4,
        n_questions: 40,
        dropout: 0.0,
    };
    let flags = AblationFlags::full();
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        weight_decay: 0.01,
        clip_norm: 1.0,
        seed: 7,
        shuffle: true,
    };
    let mut base = LanaParams::init(&hyper, &flags, 1).unwrap();
    train(&mut base, &hyper, &flags, &wins, None, &[], &train_cfg, |_| true).unwrap();

    let fit = fit_rasch(&records, 300, 0.01, 0.01).unwrap();
    let mu = fit.mean_ability();
    let var = {
        let vals: Vec<f64> = fit.abilities.values().copied().collect();
        vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64
    };

    // Memberships are probability vectors.
    let spec = layer_gaussians(mu, var, 3, 1.0).unwrap();
    let mut worst_sum = 0.0f64;
    for a in fit.abilities.values() {
        let p = membership_probs(*a, &spec).unwrap();
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        assert!(p.iter().all(|v| *v > 0.0));
    }
    assert!(worst_sum <= 1e-12, "membership sums off by {worst_sum:.2e}");

    // The layer grid is exactly the evenly spaced construction.
    let half_span = (spec.n_layers - 1) as f64 / 2.0;
    for i in 0..spec.n_layers {
        let want_mu = mu + (i as f64 - half_span) * spec.tau;
        assert_eq!(spec.mu[i].to_bits(), want_mu.to_bits());
        let want_var = var / spec.n_layers as f64;
        assert_eq!(spec.sigma_sq[i].to_bits(), want_var.to_bits());
    }

    // Evaluating with k equal to the layer count is exactly full fusion.
    let ft = FinetuneConfig {
        train: train_cfg.clone(),
        threshold: 0.01,
        scope: FinetuneScope::Full,
        workers: 1,
    };
    let ens = finetune_layers(&base, &hyper, &flags, &spec, &fit, &wins, &ft).unwrap();
    let fused = keyed(&ens.predict(&wins, spec.n_layers, 8).unwrap());
    let per_model: Vec<BTreeMap<(u32, usize, usize), f64>> = ens
        .models
        .iter()
        .map(|m| keyed(&predict(m, &hyper, &flags, &wins, 8).unwrap()))
        .collect();
    let mut worst_fuse = 0.0f64;
    for (key, got) in &fused {
        let p = membership_probs(cold_start_ability(&fit, key.0), &spec).unwrap();
        let total: f64 = p.iter().sum();
        let want: f64 =
            per_model.iter().zip(&p).map(|(preds, w)| w / total * preds[key]).sum();
        worst_fuse = worst_fuse.max((got - want).abs());
    }
    assert!(
        worst_fuse <= 1e-12,
        "k = L fusion differs from the full weighted mix by {worst_fuse:.2e}"
    );

    // A one-layer ensemble is exactly the base model trained one more epoch:
    // same windows, unit weights, same seed.
    let spec1 = layer_gaussians(mu, var, 1, 0.0).unwrap();
    let ens1 = finetune_layers(&base, &hyper, &flags, &spec1, &fit, &wins, &ft).unwrap();
    let mut manual = base.clone();
    train(
        &mut manual,
        &hyper,
        &flags,
        &wins,
        Some(&vec![1.0; wins.len()]),
        &[],
        &train_cfg,
        |_| true,
    )
    .unwrap();
    for ((name_a, arr_a), (name_b, arr_b)) in ens1.models[0].iter().zip(manual.iter()) {
        assert_eq!(name_a, name_b);
        let same = arr_a
            .data()
            .iter()
            .zip(arr_b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "one-layer fine-tune diverged from plain training in {name_a}");
    }
    let single = keyed(&ens1.predict(&wins, 1, 8).unwrap());
    let plain = keyed(&predict(&manual, &hyper, &flags, &wins, 8).unwrap());
    assert_eq!(single.len(), plain.len());
    for (key, got) in &single {
        assert_eq!(got.to_bits(), plain[key].to_bits());
    }

    // Students the Rasch fit has never seen route through the population
    // mean: two unseen students with identical histories predict identically.
    let unseen = 999_999u32;
    assert_eq!(cold_start_ability(&fit, unseen).to_bits(), fit.mean_ability().to_bits());
    let ghost_a = windows(&short_gap_records(unseen, 1, 16, 40), 16).unwrap();
    let ghost_b = windows(&short_gap_records(888_888, 1, 16, 40), 16).unwrap();
    let pa = ens.predict(&ghost_a, 2, 4).unwrap();
    let pb = ens.predict(&ghost_b, 2, 4).unwrap();
    assert_eq!(pa.len(), 16);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.prob.to_bits(), y.prob.to_bits());
    }

    verdict(
        7,
        "leveled coherence",
        true,
        &format!(
            "membership sums within {worst_sum:.1e} of 1, layer grid bit-exact, k = L fusion \
             within {worst_fuse:.1e} of the full mix, one-layer ensemble bit-identical to \
             continued training, cold-start students route through the population mean"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8 — persistence round-trips exactly and rejects corruption
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_checkpoints_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let params = LanaParams::init(&hyper, &flags, 42).unwrap();
    let meta = CheckpointMeta {
        hyper: hyper.clone(),
        flags,
        layer: Some(LayerMeta { index: 2, mu: 0.25, sigma_sq: 1.5 }),
    };
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params, &meta, &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta, meta);
    let mut tensor_count = 0usize;
    for ((name_a, arr_a), (name_b, arr_b)) in params.iter().zip(loaded.params.iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(arr_a.shape(), arr_b.shape());
        for (x, y) in arr_a.data().iter().zip(arr_b.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "tensor {name_a} changed across save/load");
        }
        tensor_count += 1;
    }

    // Predictions from the reloaded weights are bit-identical.
    let records = short_gap_records(1, 2, 12, hyper.n_questions as u32);
    let wins = windows(&records, hyper.seq_len).unwrap();
    let before = predict(&params, &hyper, &AblationFlags::full(), &wins, 4).unwrap();
    let after =
        predict(&loaded.params, &loaded.meta.hyper, &loaded.meta.flags, &wins, 4).unwrap();
    assert_eq!(before.len(), after.len());
    for (x, y) in before.iter().zip(&after) {
        assert_eq!(x.prob.to_bits(), y.prob.to_bits());
    }

    // Corruption is rejected with a diagnostic naming the offending field.
    let original = std::fs::read(&path).unwrap();
    let corrupt = |bytes: Vec<u8>, label: &str, needle: &str| {
        let bad = dir.path().join(format!("{label}.ckpt"));
        std::fs::write(&bad, bytes).unwrap();
        let err = load_checkpoint(&bad).expect_err("corrupted checkpoint loaded").to_string();
        assert!(err.contains(needle), "{label}: diagnostic {err:?} does not name {needle:?}");
        err
    };

    let mut bytes = original.clone();
    bytes[..4].copy_from_slice(b"JUNK");
    corrupt(bytes, "magic", "magic");

    let mut bytes = original.clone();
    bytes[4] ^= 0xFF;
    corrupt(bytes, "version", "format version");

    let mut bytes = original.clone();
    let key = b"d_model=";
    let at = bytes
        .windows(key.len())
        .position(|w| w == key)
        .expect("metadata lists d_model")
        + key.len();
    let mut i = at;
    while bytes[i] != b'\n' {
        bytes[i] = b'x';
        i += 1;
    }
    corrupt(bytes, "field", "d_model");

    let truncated = original[..original.len() - 100].to_vec();
    let bad = dir.path().join("truncated.ckpt");
    std::fs::write(&bad, truncated).unwrap();
    assert!(load_checkpoint(&bad).is_err(), "truncated checkpoint loaded");

    verdict(
        8,
        "persistence",
        true,
        &format!(
            "{tensor_count} tensors and layer metadata bit-exact across save/load, reloaded \
             predictions bit-identical, bad magic / bad version / mangled d_model / truncation \
             all rejected with named diagnostics"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 9 — the CLI is deterministic end to end
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    assert_eq!(cli::run(&owned), 0, "command failed: {args:?}");
}

/// Runs every subcommand once under `root`, all seeds and settings fixed.
fn run_full_pipeline(root: &Path, config: &Path) {
    let sim = root.join("sim");
    run_cli(&[
        "lana", "simgen",
        "--out", sim.to_str().unwrap(),
        "--students", "10",
        "--questions", "15",
        "--interactions-mean", "24",
        "--interactions-jitter", "4",
        "--seed", "7",
    ]);
    let data = sim.join("interactions.csv");
    let data = data.to_str().unwrap();
    let conf = config.to_str().unwrap();

    let rasch = root.join("rasch");
    run_cli(&["lana", "rasch", "--data", data, "--out", rasch.to_str().unwrap(), "--iterations", "60"]);
    let abilities = rasch.join("abilities.csv");

    let trained = root.join("train");
    run_cli(&["lana", "train", "--config", conf, "--data", data, "--out", trained.to_str().unwrap(), "--seed", "1"]);
    let model = trained.join("model.ckpt");

    let tuned = root.join("tuned");
    run_cli(&[
        "lana", "leveled-finetune",
        "--config", conf,
        "--data", data,
        "--checkpoint", model.to_str().unwrap(),
        "--abilities", abilities.to_str().unwrap(),
        "--out", tuned.to_str().unwrap(),
        "--epochs", "1",
        "--seed", "2",
    ]);

    run_cli(&[
        "lana", "eval",
        "--manifest", tuned.join("ensemble.manifest").to_str().unwrap(),
        "--abilities", abilities.to_str().unwrap(),
        "--data", data,
        "--out", root.join("eval").to_str().unwrap(),
        "--topk", "2",
    ]);
    run_cli(&[
        "lana", "predict",
        "--checkpoint", model.to_str().unwrap(),
        "--data", data,
        "--out", root.join("pred").to_str().unwrap(),
        "--batch-size", "8",
    ]);
    run_cli(&[
        "lana", "export-features",
        "--checkpoint", model.to_str().unwrap(),
        "--data", data,
        "--out", root.join("feat").to_str().unwrap(),
    ]);
}

fn collect_files(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, base, out);
        } else {
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn criterion_9_cli_runs_are_deterministic() {
    let temp = tempfile::tempdir().unwrap();
    let config = temp.path().join("shared.conf");
    std::fs::write(
        &config,
        "d_model = 16\n\
         n_heads = 2\n\
         n_encoder_layers = 1\n\
         n_decoder_layers = 1\n\
         seq_len = 16\n\
         d_piv = 4\n\
         epochs = 1\n\
         batch_size = 8\n\
         lr = 0.002\n\
         n_layers = 2\n\
         topk = 2\n",
    )
    .unwrap();

    let roots: Vec<PathBuf> = ["a", "b"].iter().map(|n| temp.path().join(n)).collect();
    for root in &roots {
        run_full_pipeline(root, &config);
    }

    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    collect_files(&roots[0], &roots[0], &mut first);
    collect_files(&roots[1], &roots[1], &mut second);

    let names: Vec<&String> = first.keys().collect();
    assert_eq!(
        names,
        second.keys().collect::<Vec<_>>(),
        "the two runs produced different file sets"
    );
    let mut csv_count = 0usize;
    for (name, bytes) in &first {
        assert_eq!(
            bytes, &second[name],
            "{name} differs between identical runs"
        );
        if name.ends_with(".csv") {
            csv_count += 1;
        }
    }

    verdict(
        9,
        "CLI determinism",
        csv_count >= 7,
        &format!(
            "all 7 subcommands ran twice with identical settings: {} files byte-identical \
             ({csv_count} CSVs, the rest checkpoints and manifests)",
            first.len()
        ),
    );
}
