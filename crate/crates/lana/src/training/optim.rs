//! Decoupled-weight-decay Adam and gradient utilities.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::LanaParams;
use crate::tensor::{Array, Tensor};

/// Adam with decoupled weight decay. Defaults: β₁ 0.9, β₂ 0.999, ε 1e-8,
/// decay 0.01.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of applied (non-skipped) steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Only parameters present in `grads` move;
    /// a parameter with an all-zero gradient still feels the decay, while an
    /// absent (frozen) one is untouched entirely. If any gradient value is
    /// non-finite the whole step is skipped — state included — and `false`
    /// comes back.
    pub fn step(&mut self, params: &mut LanaParams, grads: &BTreeMap<String, Array>) -> Result<bool> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient for {name:?} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.data().iter().all(|x| x.is_finite()) {
                eprintln!("warning: non-finite gradient for {name:?}; skipping this step");
                return Ok(false);
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let numel = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            if m.len() != numel {
                return Err(Error::contract(format!(
                    "optimizer state for {name:?} has {} entries, gradient has {numel}",
                    m.len()
                )));
            }
            let mut updated = params.get(name)?.clone();
            let data = updated.data_mut();
            for i in 0..numel {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * self.weight_decay * data[i];
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            params.set(name, updated)?;
        }
        Ok(true)
    }
}

/// Pulls accumulated gradients out of bound leaves; leaves that never
/// received flow yield zeros, and non-trainable leaves are omitted.
pub fn collect_grads(bound: &BTreeMap<String, Tensor>) -> BTreeMap<String, Array> {
    bound
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, t)| {
            let g = t
                .grad()
                .unwrap_or_else(|| Array::zeros(&t.shape()));
            (name.clone(), g)
        })
        .collect()
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`,
/// returning the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::contract(format!("clip norm must be positive, got {max_norm}")));
    }
    let sq: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}
