use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataio::{windows, Interaction, Window};
use crate::model::{AblationFlags, LanaHyper, LanaParams};
use crate::tensor::{Array, Tape};
use crate::training::{predict, train, TrainConfig};

fn interaction(student: u32, question: u32, correct: bool, ts: i64) -> Interaction {
    Interaction {
        student_id: student,
        question_id: question,
        part: (question % 7 + 1) as u8,
        timestamp_ms: ts,
        elapsed_ms: 12_000,
        correct,
        prior_answer_viewed: false,
    }
}

// ── layer construction ──────────────────────────────────────────────────────

#[test]
fn layer_gaussians_hand_values() {
    let spec = layer_gaussians(0.0, 4.0, 4, 1.0).unwrap();
    assert_eq!(spec.mu, vec![-1.5, -0.5, 0.5, 1.5]);
    assert_eq!(spec.sigma_sq, vec![1.0; 4]);

    let single = layer_gaussians(0.7, 2.5, 1, 3.0).unwrap();
    assert_eq!(single.mu, vec![0.7]);
    assert_eq!(single.sigma_sq, vec![2.5]);

    let two = layer_gaussians(0.0, 2.0, 2, 2.0).unwrap();
    assert_eq!(two.mu, vec![-1.0, 1.0]);
    assert_eq!(two.sigma_sq, vec![1.0, 1.0]);
}

#[test]
fn layer_means_are_centered_and_variances_add_up() {
    // Dyadic inputs make the identities exact in floating point.
    let spec = layer_gaussians(0.5, 3.0, 4, 0.25).unwrap();
    let mean: f64 = spec.mu.iter().sum::<f64>() / 4.0;
    assert_eq!(mean, 0.5);
    for i in 0..4 {
        assert_eq!(spec.mu[i] + spec.mu[3 - i], 2.0 * 0.5);
    }
    assert_eq!(spec.sigma_sq.iter().sum::<f64>(), 3.0);
    assert_eq!(spec.mu[1] - spec.mu[0], 0.25);
    spec.validate().unwrap();
}

#[test]
fn layer_gaussians_rejects_bad_inputs() {
    assert!(layer_gaussians(0.0, 0.0, 2, 1.0).is_err());
    assert!(layer_gaussians(0.0, -1.0, 2, 1.0).is_err());
    assert!(layer_gaussians(0.0, 1.0, 0, 1.0).is_err());
    assert!(layer_gaussians(0.0, 1.0, 2, -0.5).is_err());
    assert!(layer_gaussians(f64::NAN, 1.0, 2, 1.0).is_err());
}

// ── membership ──────────────────────────────────────────────────────────────

fn symmetric_two_layer() -> LayerSpec {
    // Means at ±1, unit variance in both layers.
    layer_gaussians(0.0, 2.0, 2, 2.0).unwrap()
}

#[test]
fn membership_hand_values() {
    let spec = symmetric_two_layer();
    assert_eq!(membership_probs(0.0, &spec).unwrap(), vec![0.5, 0.5]);

    let p = membership_probs(1.0, &spec).unwrap();
    let e2 = (-2.0_f64).exp();
    assert!((p[0] - e2 / (1.0 + e2)).abs() < 1e-12, "got {}", p[0]);
    assert!((p[1] - 1.0 / (1.0 + e2)).abs() < 1e-12, "got {}", p[1]);
    assert!((p[0] - 0.1192).abs() < 1e-4);
    assert!((p[1] - 0.8808).abs() < 1e-4);

    let single = layer_gaussians(0.3, 1.0, 1, 0.0).unwrap();
    assert_eq!(membership_probs(-5.0, &single).unwrap(), vec![1.0]);
}

#[test]
fn membership_is_a_distribution_even_for_extreme_abilities() {
    let spec = layer_gaussians(0.1, 2.5, 5, 0.8).unwrap();
    let mut a = -50.0;
    while a <= 50.0 {
        let p = membership_probs(a, &spec).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "sum {total} at ability {a}");
        assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0), "degenerate {p:?} at ability {a}");
        // Within a moderate band no single layer can saturate to exactly 1;
        // far outside it the nearest layer's weight rounds to 1.0 because the
        // runners-up fall below one ulp.
        if a.abs() <= 12.0 {
            assert!(p.iter().all(|&x| x < 1.0), "saturated {p:?} at ability {a}");
        }
        a += 2.5;
    }
}

#[test]
fn membership_is_shift_equivariant() {
    let base = layer_gaussians(0.3, 1.7, 3, 0.6).unwrap();
    let shifted = layer_gaussians(0.3 + 1.9, 1.7, 3, 0.6).unwrap();
    for a in [-2.0, -0.3, 0.0, 0.8, 2.4] {
        let p = membership_probs(a, &base).unwrap();
        let q = membership_probs(a + 1.9, &shifted).unwrap();
        for (x, y) in p.iter().zip(&q) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y} at ability {a}");
        }
    }
}

#[test]
fn membership_rejects_non_finite_ability() {
    let spec = symmetric_two_layer();
    assert!(membership_probs(f64::NAN, &spec).is_err());
    assert!(membership_probs(f64::INFINITY, &spec).is_err());
}

// ── weighted loss ───────────────────────────────────────────────────────────

#[test]
fn weighted_loss_scales_and_gates_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Array::new(vec![1], vec![0.6931]).unwrap(), true);

    let unchanged = weighted_loss(&x, 1.0).unwrap();
    assert_eq!(unchanged.scalar_value().unwrap().to_bits(), 0.6931_f64.to_bits());

    let halved = weighted_loss(&x, 0.5).unwrap();
    assert_eq!(halved.scalar_value().unwrap(), 0.6931 * 0.5);
    assert!((halved.scalar_value().unwrap() - 0.34655).abs() < 1e-12);

    let gated = weighted_loss(&x, 0.0).unwrap();
    assert_eq!(gated.scalar_value().unwrap(), 0.0);
    tape.backward(&gated).unwrap();
    assert_eq!(x.grad().unwrap().data(), vec![0.0]);
}

#[test]
fn weighted_loss_rejects_bad_probabilities_and_shapes() {
    let tape = Tape::new();
    let x = tape.leaf(Array::new(vec![1], vec![1.0]).unwrap(), false);
    assert!(weighted_loss(&x, -0.1).is_err());
    assert!(weighted_loss(&x, 1.3).is_err());
    assert!(weighted_loss(&x, f64::NAN).is_err());
    let vector = tape.leaf(Array::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
    assert!(weighted_loss(&vector, 0.5).is_err());
}

// ── rasch ───────────────────────────────────────────────────────────────────

/// One student answers four questions 3-of-4 correctly; a mirror student
/// answers the complement. The symmetry pins every difficulty at zero, so
/// the first ability converges to the logit of the empirical accuracy.
#[test]
fn rasch_recovers_the_logit_of_empirical_accuracy() {
    let mut records = Vec::new();
    for q in 0..4 {
        records.push(interaction(1, q, q < 3, 1_000_000 + q as i64 * 60_000));
        records.push(interaction(2, q, q >= 3, 2_000_000 + q as i64 * 60_000));
    }
    let fit = fit_rasch(&records, 2000, 0.0, 0.05).unwrap();
    let a1 = fit.abilities[&1];
    let a2 = fit.abilities[&2];
    assert!((a1 - 3.0_f64.ln()).abs() < 1e-9, "got {a1}");
    assert!((a2 + 3.0_f64.ln()).abs() < 1e-9, "got {a2}");
    for (&q, &d) in &fit.difficulties {
        assert_eq!(d.abs(), 0.0, "difficulty of question {q} drifted to {d}");
    }
    assert!(fit.log_likelihood.is_finite() && fit.log_likelihood < 0.0);
    assert_eq!(fit.objective_trace.len(), 2000);
}

#[test]
fn rasch_gives_identical_students_identical_abilities() {
    let mut records = Vec::new();
    for s in 1..=3 {
        for q in 0..5 {
            records.push(interaction(s, q, q % 2 == 0, 1_000_000));
        }
    }
    // A fourth student with a different pattern keeps the problem honest.
    for q in 0..5 {
        records.push(interaction(4, q, q < 2, 1_000_000));
    }
    let fit = fit_rasch(&records, 200, 0.01, 0.05).unwrap();
    assert_eq!(fit.abilities[&1].to_bits(), fit.abilities[&2].to_bits());
    assert_eq!(fit.abilities[&2].to_bits(), fit.abilities[&3].to_bits());
    assert_ne!(fit.abilities[&1].to_bits(), fit.abilities[&4].to_bits());
}

/// With every answer correct the penalized optimum is a one-dimensional
/// fixed point in the ability-difficulty gap; solve it independently by
/// bisection and compare.
#[test]
fn rasch_penalty_pins_the_all_correct_fit() {
    let n_students = 3;
    let n_questions = 4;
    let l2 = 0.1;
    let mut records = Vec::new();
    for s in 1..=n_students {
        for q in 0..n_questions {
            records.push(interaction(s, q, true, 1_000_000));
        }
    }
    let fit = fit_rasch(&records, 1500, l2, 0.05).unwrap();

    // Gap u solves u = (Q + S) * (1 - sigmoid(u)) / (2 * l2).
    let residual = |u: f64| {
        (n_questions + n_students) as f64 * (1.0 - 1.0 / (1.0 + (-u).exp())) / (2.0 * l2) - u
    };
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gap = 0.5 * (lo + hi);

    let abilities: Vec<f64> = fit.abilities.values().copied().collect();
    assert!(abilities.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
    for &a in &abilities {
        assert!(a.is_finite());
        assert!((a - gap).abs() < 1e-9, "ability {a} vs fixed point {gap}");
    }
    for &d in fit.difficulties.values() {
        assert!(d.abs() < 1e-12, "difficulty {d} should be centered away");
    }
}

#[test]
fn rasch_objective_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let true_a: Vec<f64> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let true_d: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let mut records = Vec::new();
    for (s, &a) in true_a.iter().enumerate() {
        for (q, &d) in true_d.iter().enumerate() {
            let correct = rng.gen_bool(sigmoid(a - d));
            records.push(interaction(s as u32 + 1, q as u32, correct, 1_000_000));
        }
    }
    let fit = fit_rasch(&records, 60, DEFAULT_RASCH_L2, DEFAULT_RASCH_STEP).unwrap();
    assert!(
        fit.objective_trace.windows(2).all(|w| w[1] >= w[0]),
        "ascent lost ground somewhere in {:?}",
        fit.objective_trace
    );
    let mean_d: f64 =
        fit.difficulties.values().sum::<f64>() / fit.difficulties.len() as f64;
    assert!(mean_d.abs() < 1e-12, "difficulties not centered: mean {mean_d}");

    // The fit should broadly rank students like their true abilities.
    let fitted: Vec<f64> = (0..50).map(|s| fit.abilities[&(s as u32 + 1)]).collect();
    let r = pearson(&fitted, &true_a);
    assert!(r > 0.7, "ability correlation only {r}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn rasch_rejects_empty_and_bad_settings() {
    assert!(fit_rasch(&[], 10, 0.01, 0.05).is_err());
    let records = vec![interaction(1, 0, true, 1_000_000)];
    assert!(fit_rasch(&records, 10, -0.01, 0.05).is_err());
    assert!(fit_rasch(&records, 10, 0.01, 0.0).is_err());
}

#[test]
fn cold_start_falls_back_to_the_mean() {
    let mut abilities = BTreeMap::new();
    abilities.insert(1_u32, 1.0);
    abilities.insert(2, 2.0);
    abilities.insert(3, -0.5);
    let fit = RaschFit::from_abilities(abilities).unwrap();
    assert_eq!(cold_start_ability(&fit, 2), 2.0);
    let expected_mean = (1.0 + 2.0 + -0.5) / 3.0;
    assert_eq!(cold_start_ability(&fit, 99), expected_mean);
    assert_eq!(fit.mean_ability(), expected_mean);
    assert!(RaschFit::from_abilities(BTreeMap::new()).is_err());
}

// ── fusion ──────────────────────────────────────────────────────────────────

#[test]
fn topk_fusion_hand_values() {
    let a = vec![0.9, 0.2, 0.4];
    let b = vec![0.1, 0.6, 0.5];
    let c = vec![0.5, 0.5, 0.5];
    let preds = [a.clone(), b.clone(), c.clone()];

    // k=1 routes to the top layer bit-for-bit.
    let one = topk_fuse(&preds, &[0.6, 0.3, 0.1], 1).unwrap();
    for (x, y) in one.iter().zip(&a) {
        assert_eq!(x.to_bits(), y.to_bits());
    }

    // Ties prefer the lower index.
    let tied = topk_fuse(&preds, &[0.4, 0.4, 0.2], 1).unwrap();
    assert_eq!(tied[0].to_bits(), a[0].to_bits());

    // Equal weights over two layers average them exactly.
    let mean = topk_fuse(&preds[..2], &[0.5, 0.5], 2).unwrap();
    for ((x, ai), bi) in mean.iter().zip(&a).zip(&b) {
        assert_eq!(x.to_bits(), ((ai + bi) / 2.0).to_bits());
    }

    // Dropping the smallest membership renormalizes the survivors.
    let two = topk_fuse(&preds, &[0.6, 0.3, 0.1], 2).unwrap();
    for i in 0..3 {
        let expect = (0.6 * a[i] + 0.3 * b[i]) / 0.9;
        assert!((two[i] - expect).abs() < 1e-12, "position {i}: {} vs {expect}", two[i]);
    }

    // k = L is the fully renormalized convex combination.
    let full = topk_fuse(&preds, &[0.2, 0.3, 0.5], 3).unwrap();
    for i in 0..3 {
        let total = 0.2 + 0.3 + 0.5;
        let expect = (0.2 * a[i] + 0.3 * b[i] + 0.5 * c[i]) / total;
        assert!((full[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn sigmoid_literal_fusion_matches_its_formula() {
    let a = vec![0.9, 0.2];
    let b = vec![0.1, 0.6];
    let out =
        topk_fuse_with(&[a.clone(), b.clone()], &[0.75, 0.25], 2, FusionMode::SigmoidLiteral)
            .unwrap();
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    for i in 0..2 {
        let expect = s(0.75) * a[i] + s(0.25) * b[i];
        assert!((out[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn fusion_rejects_bad_inputs() {
    let preds = [vec![0.5], vec![0.5]];
    assert!(topk_fuse(&preds, &[0.5, 0.5], 0).is_err());
    assert!(topk_fuse(&preds, &[0.5, 0.5], 3).is_err());
    assert!(topk_fuse(&preds, &[0.3, 0.3], 1).is_err(), "memberships must sum to 1");
    assert!(topk_fuse(&preds, &[0.5], 1).is_err(), "length mismatch");
    assert!(topk_fuse(&preds, &[f64::NAN, 1.0], 1).is_err());
    let ragged = [vec![0.5, 0.5], vec![0.5]];
    assert!(topk_fuse(&ragged, &[0.5, 0.5], 2).is_err());
}

// ── fine-tuning ─────────────────────────────────────────────────────────────

fn toy_hyper() -> LanaHyper {
    LanaHyper {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        seq_len: 8,
        d_piv: 4,
        n_questions: 12,
        dropout: 0.0,
    }
}

fn toy_windows(n_students: u32, per_student: usize) -> Vec<Window> {
    let hyper = toy_hyper();
    let mut records = Vec::new();
    for s in 0..n_students {
        let mut ts = 1_650_000_000_000_i64 + s as i64 * 9_999_999;
        for i in 0..per_student {
            let q = (s as usize + i * 5) as u32 % hyper.n_questions as u32;
            records.push(interaction(s + 1, q, q % 2 == 0, ts));
            ts += 50_000 + (i as i64 % 3) * 130_000;
        }
    }
    windows(&records, hyper.seq_len).unwrap()
}

fn flat_abilities(n_students: u32, value: f64) -> RaschFit {
    let abilities = (1..=n_students).map(|s| (s, value)).collect();
    RaschFit::from_abilities(abilities).unwrap()
}

fn spread_abilities(n_students: u32, spread: f64) -> RaschFit {
    let abilities = (1..=n_students)
        .map(|s| (s, ((s as f64) - (n_students as f64 + 1.0) / 2.0) * spread))
        .collect();
    RaschFit::from_abilities(abilities).unwrap()
}

#[test]
fn single_layer_finetune_equals_plain_training() {
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let pretrained = LanaParams::init(&hyper, &flags, 11).unwrap();
    let wins = toy_windows(4, 8);
    let spec = layer_gaussians(0.0, 1.0, 1, 0.0).unwrap();
    let fit = spread_abilities(4, 0.7);
    let cfg = FinetuneConfig {
        train: TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..Default::default() },
        ..Default::default()
    };
    let ensemble =
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &cfg).unwrap();
    assert_eq!(ensemble.n_layers(), 1);

    let mut plain = pretrained.clone();
    train(&mut plain, &hyper, &flags, &wins, None, &[], &cfg.train, |_| true).unwrap();
    assert_eq!(ensemble.models[0], plain);
    assert_ne!(ensemble.models[0], pretrained, "fine-tuning should move the weights");

    // And the one-layer ensemble predicts exactly like its single model.
    let ens_preds = ensemble.predict(&wins, 1, 4).unwrap();
    let plain_preds = predict(&plain, &hyper, &flags, &wins, 4).unwrap();
    assert_eq!(ens_preds, plain_preds);
}

#[test]
fn starved_layer_keeps_the_pretrained_weights() {
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let pretrained = LanaParams::init(&hyper, &flags, 13).unwrap();
    let wins = toy_windows(3, 8);
    // Layer means at ±6 with unit variance; every student sits at +6, so
    // layer 0 sees membership ~e^{-72} — far below any sensible threshold.
    let spec = layer_gaussians(0.0, 2.0, 2, 12.0).unwrap();
    let fit = flat_abilities(3, 6.0);
    let cfg = FinetuneConfig {
        train: TrainConfig { epochs: 1, batch_size: 4, seed: 3, ..Default::default() },
        ..Default::default()
    };
    let ensemble =
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &cfg).unwrap();
    assert_eq!(ensemble.models[0], pretrained, "starved layer must keep pretrained weights");
    assert_ne!(ensemble.models[1], pretrained, "fed layer must train");
}

#[test]
fn encoder_only_scope_freezes_everything_else() {
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let pretrained = LanaParams::init(&hyper, &flags, 17).unwrap();
    let wins = toy_windows(3, 8);
    let spec = layer_gaussians(0.0, 1.0, 1, 0.0).unwrap();
    let fit = flat_abilities(3, 0.0);
    let cfg = FinetuneConfig {
        train: TrainConfig { epochs: 1, batch_size: 4, seed: 5, ..Default::default() },
        scope: FinetuneScope::EncoderOnly,
        ..Default::default()
    };
    let ensemble =
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &cfg).unwrap();
    let tuned = &ensemble.models[0];
    let mut moved = 0;
    for (name, value) in tuned.iter() {
        let before = pretrained.get(name).unwrap();
        if name.starts_with("enc.") || name.starts_with("enc_in.") || name.starts_with("srfe_") {
            if value != before {
                moved += 1;
            }
        } else {
            assert_eq!(value, before, "{name} moved outside the encoder scope");
        }
    }
    assert!(moved > 0, "no encoder parameter moved at all");
}

#[test]
fn parallel_finetune_matches_serial() {
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let pretrained = LanaParams::init(&hyper, &flags, 19).unwrap();
    let wins = toy_windows(6, 8);
    let spec = layer_gaussians(0.0, 1.0, 3, 1.0).unwrap();
    let fit = spread_abilities(6, 0.6);
    let base = FinetuneConfig {
        train: TrainConfig { epochs: 1, batch_size: 4, seed: 21, ..Default::default() },
        ..Default::default()
    };
    let serial = finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &base).unwrap();
    let parallel_cfg = FinetuneConfig { workers: 3, ..base };
    let parallel =
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &parallel_cfg).unwrap();
    assert_eq!(serial.models, parallel.models);
}

#[test]
fn full_fusion_matches_the_reference_formula() {
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let pretrained = LanaParams::init(&hyper, &flags, 23).unwrap();
    let wins = toy_windows(5, 8);
    let spec = layer_gaussians(0.0, 1.0, 3, 0.8).unwrap();
    let fit = spread_abilities(5, 0.9);
    let cfg = FinetuneConfig {
        train: TrainConfig { epochs: 1, batch_size: 4, seed: 25, ..Default::default() },
        ..Default::default()
    };
    let ensemble =
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &cfg).unwrap();

    let per_model: Vec<Vec<_>> = ensemble
        .models
        .iter()
        .map(|m| predict(m, &hyper, &flags, &wins, 4).unwrap())
        .collect();
    let fused = ensemble.predict(&wins, 3, 4).unwrap();
    assert_eq!(fused.len(), per_model[0].len());
    for (j, out) in fused.iter().enumerate() {
        let p = ensemble.membership(out.student_id).unwrap();
        let singles: Vec<Vec<f64>> =
            per_model.iter().map(|preds| vec![preds[j].prob]).collect();
        let expect = topk_fuse(&singles, &p, 3).unwrap()[0];
        assert_eq!(out.prob.to_bits(), expect.to_bits(), "position {j}");
        assert!(out.prob > 0.0 && out.prob < 1.0);
    }

    // Restricting to the top layer changes the routing.
    let routed = ensemble.predict(&wins, 1, 4).unwrap();
    assert!(routed.iter().zip(&fused).any(|(r, f)| r.prob != f.prob));

    let (value, preds) = ensemble.evaluate(&wins, 2, 4).unwrap();
    assert_eq!(preds.len(), fused.len());
    assert!((0.0..=1.0).contains(&value));
}

#[test]
fn finetune_rejects_bad_configs() {
    let hyper = toy_hyper();
    let flags = AblationFlags::full();
    let pretrained = LanaParams::init(&hyper, &flags, 27).unwrap();
    let wins = toy_windows(2, 8);
    let spec = layer_gaussians(0.0, 1.0, 2, 1.0).unwrap();
    let fit = flat_abilities(2, 0.0);

    let zero_workers = FinetuneConfig { workers: 0, ..Default::default() };
    assert!(
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &zero_workers).is_err()
    );
    let bad_threshold = FinetuneConfig { threshold: 1.5, ..Default::default() };
    assert!(
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &wins, &bad_threshold).is_err()
    );
    assert!(
        finetune_layers(&pretrained, &hyper, &flags, &spec, &fit, &[], &Default::default())
            .is_err()
    );
}

// ── persistence ─────────────────────────────────────────────────────────────

#[test]
fn ability_tables_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("abilities.csv");
    let mut abilities = BTreeMap::new();
    abilities.insert(3_u32, 0.5);
    abilities.insert(10, -1.2345678901234567);
    abilities.insert(7, 2.0_f64.sqrt());
    write_abilities_csv(&path, &abilities).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("student_id,ability\n3,0.5\n7,"));

    let loaded = read_abilities_csv(&path).unwrap();
    assert_eq!(loaded.len(), 3);
    for (id, value) in &abilities {
        assert_eq!(loaded[id].to_bits(), value.to_bits());
    }

    let dpath = dir.path().join("difficulties.csv");
    write_difficulties_csv(&dpath, &abilities).unwrap();
    assert_eq!(read_difficulties_csv(&dpath).unwrap(), abilities);
    assert!(read_abilities_csv(&dpath).is_err(), "headers must match the table kind");
}

#[test]
fn ability_table_rejects_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("abilities.csv");
    for bad in [
        "wrong,header\n1,0.5\n",
        "student_id,ability\n1\n",
        "student_id,ability\nx,0.5\n",
        "student_id,ability\n1,zebra\n",
        "student_id,ability\n1,0.5\n1,0.7\n",
        "student_id,ability\n1,NaN\n",
        "",
    ] {
        std::fs::write(&path, bad).unwrap();
        assert!(read_abilities_csv(&path).is_err(), "accepted {bad:?}");
    }
}

#[test]
fn manifest_round_trips_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ensemble.manifest");
    let spec = layer_gaussians(0.25, 1.5, 2, 1.0).unwrap();
    let model_paths = vec![PathBuf::from("layer0.lana"), PathBuf::from("sub/layer1.lana")];
    write_manifest(&path, &spec, &model_paths).unwrap();

    let manifest = read_manifest(&path).unwrap();
    assert_eq!(manifest.spec, spec);
    assert_eq!(manifest.model_paths[0], dir.path().join("layer0.lana"));
    assert_eq!(manifest.model_paths[1], dir.path().join("sub/layer1.lana"));

    // Path count must match the layer count.
    assert!(write_manifest(&path, &spec, &model_paths[..1]).is_err());
}

#[test]
fn manifest_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ensemble.manifest");
    let spec = layer_gaussians(0.0, 2.0, 2, 2.0).unwrap();
    let model_paths = vec![PathBuf::from("a.lana"), PathBuf::from("b.lana")];
    write_manifest(&path, &spec, &model_paths).unwrap();
    let good = std::fs::read_to_string(&path).unwrap();

    for (label, mutate) in [
        ("missing key", good.replace("tau=2\n", "")),
        ("unknown key", format!("{good}surprise=1\n")),
        ("duplicate key", format!("{good}tau=2\n")),
        ("malformed line", good.replace("tau=2", "tau")),
        ("bad number", good.replace("tau=2", "tau=two")),
        ("broken spacing", good.replace("mu.0=-1", "mu.0=-0.9")),
    ] {
        std::fs::write(&path, &mutate).unwrap();
        assert!(read_manifest(&path).is_err(), "accepted manifest with {label}");
    }
}
