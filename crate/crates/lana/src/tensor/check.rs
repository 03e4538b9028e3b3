//! Finite-difference verification of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Tape, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences, returning the worst relative error over every input
/// coordinate.
///
/// `build` is called with a fresh tape and one leaf per entry of `point`; it
/// must produce a single-element tensor. The relative error of a coordinate
/// is `|analytic - numeric| / max(|analytic|, 1e-8)`. Non-finite losses and
/// non-scalar outputs are reported as errors.
pub fn finite_diff_check<F>(build: F, point: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::contract(format!("step size {eps} outside (0, 1)")));
    }
    if point.is_empty() {
        return Err(Error::contract("finite_diff_check needs at least one input"));
    }

    // Analytic gradients.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = point.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&tape, &leaves)?;
    let base = loss.scalar_value()?;
    if !base.is_finite() {
        return Err(Error::numeric(format!("loss is not finite at the base point ({base})")));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(point)
        .map(|(l, a)| l.grad().map_or_else(|| vec![0.0; a.numel()], |g| g.data().to_vec()))
        .collect();

    let eval = |inputs: &[Array]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        let loss = build(&tape, &leaves)?;
        let v = loss.scalar_value()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss is not finite at a probe point ({v})")));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Array> = point.to_vec();
    for (i, arr) in point.iter().enumerate() {
        for c in 0..arr.numel() {
            let orig = arr.data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let ana = analytic[i][c];
            let rel = (ana - numeric).abs() / ana.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Like [`finite_diff_check`], but probes only `samples_per_input` randomly
/// chosen coordinates of each input (all of them when an input is smaller).
/// Intended for graphs with large parameter tensors, where differencing
/// every coordinate is prohibitive.
///
/// `floor` sets the smallest gradient magnitude that is judged relatively:
/// a coordinate whose analytic and numeric gradients are both below `floor`
/// is effectively held to the absolute bound `floor * tolerance` instead,
/// which keeps difference-quotient roundoff on near-flat coordinates from
/// drowning the comparison. A sign or scale error still fails loudly, since
/// then `|analytic - numeric|` is on the order of the gradient itself.
pub fn finite_diff_spot_check<F>(
    build: F,
    point: &[Array],
    eps: f64,
    samples_per_input: usize,
    seed: u64,
    floor: f64,
) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::contract(format!("step size {eps} outside (0, 1)")));
    }
    if point.is_empty() || samples_per_input == 0 {
        return Err(Error::contract("need at least one input and one sample"));
    }
    if !(floor > 0.0) {
        return Err(Error::contract(format!("gradient floor must be positive, got {floor}")));
    }

    let tape = Tape::new();
    let leaves: Vec<Tensor> = point.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = build(&tape, &leaves)?;
    if !loss.scalar_value()?.is_finite() {
        return Err(Error::numeric("loss is not finite at the base point"));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(point)
        .map(|(l, a)| l.grad().map_or_else(|| vec![0.0; a.numel()], |g| g.data().to_vec()))
        .collect();

    let eval = |inputs: &[Array]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        let v = build(&tape, &leaves)?.scalar_value()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss is not finite at a probe point ({v})")));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe: Vec<Array> = point.to_vec();
    for (i, arr) in point.iter().enumerate() {
        let numel = arr.numel();
        let coords: Vec<usize> = if numel <= samples_per_input {
            (0..numel).collect()
        } else {
            (0..samples_per_input).map(|_| rng.gen_range(0..numel)).collect()
        };
        for c in coords {
            let orig = arr.data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let ana = analytic[i][c];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
