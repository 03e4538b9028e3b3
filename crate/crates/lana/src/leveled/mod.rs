//! Ability-leveled model specialization.
//!
//! Students are scored by a Rasch fit ([`fit_rasch`]), grouped softly into
//! ability layers by Gaussian memberships ([`layer_gaussians`],
//! [`membership_probs`]), and each layer fine-tunes its own clone of a
//! pretrained network on membership-weighted data ([`finetune_layers`]).
//! At inference the per-layer outputs are fused by a renormalized top-k
//! weighting ([`topk_fuse`]), and students never seen during fitting fall
//! back to the population-mean ability ([`cold_start_ability`]).

mod finetune;
mod fuse;
mod io;
mod rasch;

pub use finetune::{
    finetune_layers, FinetuneConfig, FinetuneScope, LayerEnsemble, MEMBERSHIP_THRESHOLD,
};
pub use fuse::{topk_fuse, topk_fuse_with, FusionMode};
pub use io::{
    read_abilities_csv, read_difficulties_csv, read_manifest, write_abilities_csv,
    write_difficulties_csv, write_manifest, EnsembleManifest,
};
pub use rasch::{
    cold_start_ability, fit_rasch, RaschFit, DEFAULT_RASCH_ITERATIONS, DEFAULT_RASCH_L2,
    DEFAULT_RASCH_STEP,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft grouping of students into `n_layers` ability bands.
///
/// Consecutive layer means differ by the constant gap `tau` and are centered
/// on the population mean `mu_a`; every layer shares the variance
/// `sigma_a_sq / n_layers`, so the per-layer variances add back up to the
/// population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub n_layers: usize,
    /// Gap between consecutive layer means, in logit units.
    pub tau: f64,
    /// Population ability mean.
    pub mu_a: f64,
    /// Population ability variance.
    pub sigma_a_sq: f64,
    /// Per-layer means, ascending.
    pub mu: Vec<f64>,
    /// Per-layer variances (all equal).
    pub sigma_sq: Vec<f64>,
}

impl LayerSpec {
    /// Checks the structural invariants: the means are evenly spaced with
    /// gap `tau` and centered on `mu_a`, and every variance equals
    /// `sigma_a_sq / n_layers`, bit-for-bit as [`layer_gaussians`] builds
    /// them.
    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers;
        if l == 0 {
            return Err(Error::contract("a layer spec needs at least one layer"));
        }
        if !(self.sigma_a_sq.is_finite() && self.sigma_a_sq > 0.0) {
            return Err(Error::contract(format!(
                "population variance must be positive and finite, got {}",
                self.sigma_a_sq
            )));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::contract(format!(
                "layer gap must be nonnegative and finite, got {}",
                self.tau
            )));
        }
        if !self.mu_a.is_finite() {
            return Err(Error::contract(format!("population mean {} is not finite", self.mu_a)));
        }
        if self.mu.len() != l || self.sigma_sq.len() != l {
            return Err(Error::contract(format!(
                "spec declares {l} layers but carries {} means and {} variances",
                self.mu.len(),
                self.sigma_sq.len()
            )));
        }
        let var = self.sigma_a_sq / l as f64;
        for i in 0..l {
            let mu = self.mu_a + (i as f64 - (l - 1) as f64 / 2.0) * self.tau;
            if self.mu[i] != mu {
                return Err(Error::contract(format!(
                    "layer {i} mean {} breaks the even spacing (expected {mu})",
                    self.mu[i]
                )));
            }
            if self.sigma_sq[i] != var {
                return Err(Error::contract(format!(
                    "layer {i} variance {} differs from the shared {var}",
                    self.sigma_sq[i]
                )));
            }
        }
        Ok(())
    }
}

/// Builds the per-layer Gaussians for `n_layers` ability bands.
///
/// Layer `i` gets mean `mu_a + (i - (n_layers-1)/2) * tau` — evenly spaced,
/// centered on the population mean — and variance `sigma_a_sq / n_layers`.
pub fn layer_gaussians(mu_a: f64, sigma_a_sq: f64, n_layers: usize, tau: f64) -> Result<LayerSpec> {
    if n_layers == 0 {
        return Err(Error::contract("need at least one layer"));
    }
    if !(sigma_a_sq.is_finite() && sigma_a_sq > 0.0) {
        return Err(Error::contract(format!(
            "population variance must be positive and finite, got {sigma_a_sq}"
        )));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::contract(format!("layer gap must be nonnegative and finite, got {tau}")));
    }
    if !mu_a.is_finite() {
        return Err(Error::contract(format!("population mean {mu_a} is not finite")));
    }
    let half_span = (n_layers - 1) as f64 / 2.0;
    let mu = (0..n_layers).map(|i| mu_a + (i as f64 - half_span) * tau).collect();
    let var = sigma_a_sq / n_layers as f64;
    Ok(LayerSpec {
        n_layers,
        tau,
        mu_a,
        sigma_a_sq,
        mu,
        sigma_sq: vec![var; n_layers],
    })
}

/// Probability of a student with ability `a` belonging to each layer:
/// the layer's Gaussian density at `a`, normalized across layers.
///
/// The result sums to 1 and every entry is strictly positive for finite `a`.
pub fn membership_probs(a: f64, spec: &LayerSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if !a.is_finite() {
        return Err(Error::contract(format!("ability {a} is not finite")));
    }
    // Work with log densities and subtract the maximum before exponentiating
    // so extreme abilities stay representable.
    let log_density: Vec<f64> = spec
        .mu
        .iter()
        .zip(&spec.sigma_sq)
        .map(|(&mu, &var)| {
            let diff = a - mu;
            -0.5 * (2.0 * std::f64::consts::PI * var).ln() - diff * diff / (2.0 * var)
        })
        .collect();
    let peak = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_density.iter().map(|ld| (ld - peak).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Scales a scalar loss by a membership probability `p` in `[0, 1]`.
///
/// With `p = 1` the loss is unchanged; with `p = 0` the result carries no
/// gradient, so the window effectively drops out of the update.
pub fn weighted_loss(base_loss: &Tensor, p: f64) -> Result<Tensor> {
    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
        return Err(Error::contract(format!(
            "membership probability must lie in [0, 1], got {p}"
        )));
    }
    if base_loss.shape() != [1] {
        return Err(Error::contract(format!(
            "loss must be a scalar of shape [1], got {:?}",
            base_loss.shape()
        )));
    }
    base_loss.scale(p)
}

#[cfg(test)]
mod tests;
