//! Loss, optimizer, metrics, train/eval loops, and checkpoint persistence.

mod checkpoint;
mod loss;
mod optim;

use std::cell::RefCell;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, LayerMeta, MAGIC, VERSION,
};
pub use loss::{auc, bce_loss, weighted_bce_loss, CLAMP};
pub use optim::{clip_gradients, collect_grads, AdamW};

use crate::dataio::Window;
use crate::error::{Error, Result};
use crate::model::{bind, model_forward, AblationFlags, Batch, LanaHyper, LanaParams};
use crate::tensor::Tape;

/// Knobs of one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm ceiling; 0.0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            lr: 5e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!("learning rate {} is invalid", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::contract(format!("weight decay {} is invalid", self.weight_decay)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::contract(format!("clip norm {} is invalid", self.clip_norm)));
        }
        Ok(())
    }
}

/// One epoch's summary. `valid_auc` is NaN when no validation set was given.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub skipped_steps: usize,
}

/// One per-position prediction at a real (non-pad) position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub student_id: u32,
    pub window_index: usize,
    pub position: usize,
    pub prob: f64,
    pub target: u8,
}

/// Runs the network over `windows` without gradients and collects one
/// prediction per valid position, in window order.
pub fn predict(
    params: &LanaParams,
    hyper: &LanaHyper,
    flags: &AblationFlags,
    windows: &[Window],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let mut out = Vec::new();
    for chunk in windows.chunks(batch_size) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let batch = Batch::build(&refs, None, hyper)?;
        let tape = Tape::new();
        let bound = bind(&tape, params, |_| false);
        let fwd = model_forward(&tape, &bound, hyper, flags, &batch, None)?;
        let probs = fwd.probs.data();
        for (wi, win) in chunk.iter().enumerate() {
            for t in 0..batch.seq_len {
                let flat = wi * batch.seq_len + t;
                if batch.valid[flat] {
                    out.push(Prediction {
                        student_id: win.student_id,
                        window_index: win.index,
                        position: t,
                        prob: probs[flat],
                        target: win.target[t],
                    });
                }
            }
        }
    }
    Ok(out)
}

/// AUC over all valid positions plus the per-position predictions behind it.
pub fn evaluate(
    params: &LanaParams,
    hyper: &LanaHyper,
    flags: &AblationFlags,
    windows: &[Window],
    batch_size: usize,
) -> Result<(f64, Vec<Prediction>)> {
    if windows.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty window set"));
    }
    let preds = predict(params, hyper, flags, windows, batch_size)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.target == 1).collect();
    Ok((auc(&scores, &labels)?, preds))
}

/// Trains `params` in place and reports per-epoch statistics.
///
/// Mini-batches are drawn in a seeded shuffled order that keeps advancing
/// across epochs. `window_weights` (parallel to `train_windows`) scales each
/// window's positions in the loss; weight zero is bit-for-bit equivalent to
/// leaving the window out. `trainable` picks which parameters move — others
/// neither accumulate gradients nor feel weight decay. `valid_windows`, when
/// nonempty, is scored for AUC after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &mut LanaParams,
    hyper: &LanaHyper,
    flags: &AblationFlags,
    train_windows: &[Window],
    window_weights: Option<&[f64]>,
    valid_windows: &[Window],
    cfg: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    hyper.validate()?;
    if train_windows.is_empty() {
        return Err(Error::contract("cannot train on an empty window set"));
    }
    if let Some(w) = window_weights {
        if w.len() != train_windows.len() {
            return Err(Error::contract(format!(
                "{} weights for {} training windows",
                w.len(),
                train_windows.len()
            )));
        }
    }

    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        let mut skipped_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let weights: Option<Vec<f64>> =
                window_weights.map(|w| chunk.iter().map(|&i| w[i]).collect());
            if let Some(w) = &weights {
                // A batch of only zero-weight windows carries no signal.
                if w.iter().all(|&x| x == 0.0) {
                    continue;
                }
            }
            let batch = Batch::build(&refs, weights.as_deref(), hyper)?;
            let tape = Tape::new();
            let bound = bind(&tape, params, &trainable);
            let fwd = model_forward(&tape, &bound, hyper, flags, &batch, Some(&dropout_rng))?;
            let loss = weighted_bce_loss(&fwd.probs, &batch.targets, &batch.weights)?;
            let loss_value = loss.scalar_value()?;
            tape.backward(&loss)?;
            let mut grads = collect_grads(&bound);
            if cfg.clip_norm > 0.0 {
                clip_gradients(&mut grads, cfg.clip_norm)?;
            }
            if optimizer.step(params, &grads)? {
                let batch_weight: f64 = batch.weights.iter().sum();
                loss_sum += loss_value * batch_weight;
                weight_sum += batch_weight;
            } else {
                skipped_steps += 1;
            }
        }
        let train_loss = if weight_sum > 0.0 { loss_sum / weight_sum } else { f64::NAN };
        let valid_auc = if valid_windows.is_empty() {
            f64::NAN
        } else {
            evaluate(params, hyper, flags, valid_windows, cfg.batch_size)?.0
        };
        history.push(EpochStats { epoch: epoch + 1, train_loss, valid_auc, skipped_steps });
    }
    Ok(history)
}

/// Writes history as `epoch,train_loss,valid_auc` CSV.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,valid_auc\n");
    for h in history {
        text.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.valid_auc));
    }
    std::fs::write(path, text).map_err(|source| Error::io(path.display().to_string(), source))
}
