//! Per-layer fine-tuning of a pretrained network and ensemble inference.

use std::collections::BTreeMap;

use crate::dataio::Window;
use crate::error::{Error, Result};
use crate::model::{AblationFlags, LanaHyper, LanaParams};
use crate::training::{auc, predict, train, Prediction, TrainConfig};

use super::fuse::selection_and_weights;
use super::rasch::{cold_start_ability, RaschFit};
use super::{membership_probs, FusionMode, LayerSpec};

/// Minimum membership probability for a window to join a layer's
/// fine-tuning set.
pub const MEMBERSHIP_THRESHOLD: f64 = 0.01;

/// Which parameters a layer's fine-tuning may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneScope {
    /// Every parameter.
    Full,
    /// Only the encoder stack, its input projection, and the student-feature
    /// extractors; embeddings and the decoder stay shared.
    EncoderOnly,
}

impl FinetuneScope {
    /// Whether the parameter `name` is trainable under this scope.
    pub fn allows(self, name: &str) -> bool {
        match self {
            FinetuneScope::Full => true,
            FinetuneScope::EncoderOnly => {
                name.starts_with("enc.")
                    || name.starts_with("enc_in.")
                    || name.starts_with("srfe_")
            }
        }
    }
}

/// Settings for [`finetune_layers`].
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    /// Per-layer training settings. Layer `i` trains with seed
    /// `train.seed + i` so layers shuffle independently.
    pub train: TrainConfig,
    /// Membership cutoff for including a window in a layer's data.
    pub threshold: f64,
    pub scope: FinetuneScope,
    /// Layers fine-tune as independent jobs on up to this many threads.
    pub workers: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            train: TrainConfig::default(),
            threshold: MEMBERSHIP_THRESHOLD,
            scope: FinetuneScope::Full,
            workers: 1,
        }
    }
}

/// A pretrained network cloned once per ability layer and fine-tuned on that
/// layer's membership-weighted windows. All clones share one architecture.
#[derive(Clone, Debug)]
pub struct LayerEnsemble {
    pub hyper: LanaHyper,
    pub flags: AblationFlags,
    pub spec: LayerSpec,
    /// Source of per-student abilities for membership lookups.
    pub fit: RaschFit,
    /// One parameter set per layer, ascending layer index.
    pub models: Vec<LanaParams>,
}

impl LayerEnsemble {
    pub fn n_layers(&self) -> usize {
        self.models.len()
    }

    /// Membership vector for one student, falling back to the population
    /// mean ability for students missing from the fit.
    pub fn membership(&self, student_id: u32) -> Result<Vec<f64>> {
        membership_probs(cold_start_ability(&self.fit, student_id), &self.spec)
    }

    /// Runs every layer's model over `windows` and fuses the per-position
    /// probabilities with renormalized top-k weights chosen per student.
    pub fn predict(
        &self,
        windows: &[Window],
        k: usize,
        batch_size: usize,
    ) -> Result<Vec<Prediction>> {
        if self.models.is_empty() {
            return Err(Error::contract("ensemble has no layers"));
        }
        if self.models.len() != self.spec.n_layers {
            return Err(Error::contract(format!(
                "{} models for {} layers",
                self.models.len(),
                self.spec.n_layers
            )));
        }
        let per_model: Vec<Vec<Prediction>> = self
            .models
            .iter()
            .map(|m| predict(m, &self.hyper, &self.flags, windows, batch_size))
            .collect::<Result<_>>()?;

        let mut routing: BTreeMap<u32, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for win in windows {
            if !routing.contains_key(&win.student_id) {
                let p = self.membership(win.student_id)?;
                let sel = selection_and_weights(&p, k, FusionMode::Renormalized)?;
                routing.insert(win.student_id, sel);
            }
        }

        let mut fused = per_model[0].clone();
        for (j, out) in fused.iter_mut().enumerate() {
            let (selected, weights) = &routing[&out.student_id];
            let mut acc = 0.0;
            for (&layer, &w) in selected.iter().zip(weights) {
                acc += w * per_model[layer][j].prob;
            }
            out.prob = acc;
        }
        Ok(fused)
    }

    /// [`predict`](Self::predict) followed by AUC over the fused
    /// probabilities.
    pub fn evaluate(
        &self,
        windows: &[Window],
        k: usize,
        batch_size: usize,
    ) -> Result<(f64, Vec<Prediction>)> {
        let preds = self.predict(windows, k, batch_size)?;
        if preds.is_empty() {
            return Err(Error::contract("no valid positions to evaluate"));
        }
        let scores: Vec<f64> = preds.iter().map(|p| p.prob).collect();
        let labels: Vec<bool> = preds.iter().map(|p| p.target == 1).collect();
        let value = auc(&scores, &labels)?;
        Ok((value, preds))
    }
}

/// Clones `pretrained` once per layer and fine-tunes each clone on the
/// windows whose students belong to that layer with membership at least
/// `cfg.threshold`, weighting every window's loss by the membership.
///
/// A layer with no qualifying windows keeps the pretrained weights and a
/// warning goes to stderr. Layers are independent jobs; with
/// `cfg.workers > 1` they run concurrently and the result is identical to a
/// serial run.
pub fn finetune_layers(
    pretrained: &LanaParams,
    hyper: &LanaHyper,
    flags: &AblationFlags,
    spec: &LayerSpec,
    fit: &RaschFit,
    train_windows: &[Window],
    cfg: &FinetuneConfig,
) -> Result<LayerEnsemble> {
    spec.validate()?;
    cfg.train.validate()?;
    if !(cfg.threshold.is_finite() && (0.0..=1.0).contains(&cfg.threshold)) {
        return Err(Error::contract(format!(
            "membership threshold must lie in [0, 1], got {}",
            cfg.threshold
        )));
    }
    if cfg.workers == 0 {
        return Err(Error::contract("worker count must be positive"));
    }
    if train_windows.is_empty() {
        return Err(Error::contract("no windows to fine-tune on"));
    }

    let mut memberships: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for win in train_windows {
        if !memberships.contains_key(&win.student_id) {
            let p = membership_probs(cold_start_ability(fit, win.student_id), spec)?;
            memberships.insert(win.student_id, p);
        }
    }

    // Per-layer window sets, built once up front so worker threads only read.
    let jobs: Vec<(Vec<Window>, Vec<f64>)> = (0..spec.n_layers)
        .map(|i| {
            let mut wins = Vec::new();
            let mut weights = Vec::new();
            for win in train_windows {
                let p = memberships[&win.student_id][i];
                if p >= cfg.threshold {
                    wins.push(win.clone());
                    weights.push(p);
                }
            }
            (wins, weights)
        })
        .collect();

    let run_layer = |i: usize| -> Result<LanaParams> {
        let (wins, weights) = &jobs[i];
        let mut params = pretrained.clone();
        if wins.is_empty() {
            eprintln!(
                "warning: layer {i} has no windows with membership >= {}; \
                 keeping the pretrained weights",
                cfg.threshold
            );
            return Ok(params);
        }
        let mut layer_cfg = cfg.train.clone();
        layer_cfg.seed = cfg.train.seed.wrapping_add(i as u64);
        let scope = cfg.scope;
        train(&mut params, hyper, flags, wins, Some(weights), &[], &layer_cfg, move |name| {
            scope.allows(name)
        })?;
        Ok(params)
    };

    let mut models: Vec<Option<LanaParams>> = vec![None; spec.n_layers];
    if cfg.workers == 1 {
        for (i, slot) in models.iter_mut().enumerate() {
            *slot = Some(run_layer(i)?);
        }
    } else {
        let layer_ids: Vec<usize> = (0..spec.n_layers).collect();
        for wave in layer_ids.chunks(cfg.workers) {
            let results: Vec<(usize, Result<LanaParams>)> = std::thread::scope(|s| {
                let run_layer = &run_layer;
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&i| (i, s.spawn(move || run_layer(i))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(i, h)| (i, h.join().expect("a layer worker panicked")))
                    .collect()
            });
            for (i, result) in results {
                models[i] = Some(result?);
            }
        }
    }

    Ok(LayerEnsemble {
        hyper: hyper.clone(),
        flags: *flags,
        spec: spec.clone(),
        fit: fit.clone(),
        models: models.into_iter().map(|m| m.expect("every layer ran")).collect(),
    })
}
