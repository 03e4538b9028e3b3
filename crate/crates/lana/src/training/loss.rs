//! The training objective and the ranking metric.

use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-7;

/// Cross-entropy averaged over positions with nonzero weight:
/// `sum_i w_i * -(y_i ln p_i + (1-y_i) ln(1-p_i)) / sum_i w_i`.
///
/// `probs` may have any shape; `targets` and `weights` are flat views of the
/// same element count. Positions with weight zero contribute exactly nothing,
/// bit for bit, so weighting a window with 0 equals leaving it out of the
/// batch. A weight total of zero is rejected.
pub fn weighted_bce_loss(probs: &Tensor, targets: &[f64], weights: &[f64]) -> Result<Tensor> {
    let n = probs.shape().iter().product::<usize>();
    if targets.len() != n || weights.len() != n {
        return Err(Error::contract(format!(
            "{n} probabilities with {} targets and {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::contract(format!("weight {w} is not a finite non-negative number")));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("target {t} outside [0, 1]")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("no position has positive weight"));
    }
    let tape = probs.tape();
    let flat = probs.reshape(&[n])?;
    let p = flat.clamp(CLAMP, 1.0 - CLAMP)?;
    let t = tape.constant(Array::new(vec![n], targets.to_vec())?);
    let w = tape.constant(Array::new(vec![n], weights.to_vec())?);
    let one_minus_t = t.scale(-1.0)?.add_const(1.0)?;
    let one_minus_p = p.scale(-1.0)?.add_const(1.0)?;
    let ll = t.mul(&p.ln()?)?.add(&one_minus_t.mul(&one_minus_p.ln()?)?)?;
    ll.mul(&w)?.sum_all()?.scale(-1.0 / total)
}

/// Cross-entropy averaged over the masked-in positions.
pub fn bce_loss(probs: &Tensor, targets: &[f64], valid: &[bool]) -> Result<Tensor> {
    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    weighted_bce_loss(probs, targets, &weights)
}

/// Area under the ROC curve by the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Requires at least one positive and one negative label.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores with {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::contract(format!("score {s} is not finite")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes to rank, got {n_pos} positives and {n_neg} negatives"
        )));
    }

    // Average ranks, ties sharing the mean of their rank range.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
