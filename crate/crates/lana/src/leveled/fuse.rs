//! Top-k fusion of per-layer predictions.

use crate::error::{Error, Result};

use super::sigmoid;

/// How the selected layers' outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Convex combination with weights `p_i / Σ_topk p_j`; the fused output
    /// stays a probability. The default.
    Renormalized,
    /// Literal `Σ sigmoid(p_i) · pred_i` over the selected layers. Kept for
    /// comparison only — the result can leave `[0, 1]`.
    SigmoidLiteral,
}

/// Picks the `k` layers with the largest membership and their fusion
/// weights. Ties prefer the lower index; selected layers are returned in
/// descending-membership order.
pub(crate) fn selection_and_weights(
    p: &[f64],
    k: usize,
    mode: FusionMode,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let l = p.len();
    if l == 0 {
        return Err(Error::contract("membership vector is empty"));
    }
    if !(1..=l).contains(&k) {
        return Err(Error::contract(format!("k must lie in 1..={l}, got {k}")));
    }
    for (i, &pi) in p.iter().enumerate() {
        if !(pi.is_finite() && (0.0..=1.0).contains(&pi)) {
            return Err(Error::contract(format!(
                "membership {i} must be a probability, got {pi}"
            )));
        }
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("memberships must sum to 1, got {total}")));
    }

    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    order.truncate(k);

    let weights = match mode {
        FusionMode::Renormalized => {
            let selected: f64 = order.iter().map(|&i| p[i]).sum();
            order.iter().map(|&i| p[i] / selected).collect()
        }
        FusionMode::SigmoidLiteral => order.iter().map(|&i| sigmoid(p[i])).collect(),
    };
    Ok((order, weights))
}

/// Fuses per-layer predictions with the given [`FusionMode`].
///
/// `preds[i]` holds layer `i`'s predictions, all the same length; `p` is the
/// student's membership vector. Only the `k` highest-membership layers
/// contribute.
pub fn topk_fuse_with(
    preds: &[Vec<f64>],
    p: &[f64],
    k: usize,
    mode: FusionMode,
) -> Result<Vec<f64>> {
    if preds.len() != p.len() {
        return Err(Error::contract(format!(
            "{} prediction sets for {} memberships",
            preds.len(),
            p.len()
        )));
    }
    let (selected, weights) = selection_and_weights(p, k, mode)?;
    let n = preds[selected[0]].len();
    if let Some(bad) = preds.iter().find(|v| v.len() != n) {
        return Err(Error::contract(format!(
            "prediction sets disagree on length: {n} vs {}",
            bad.len()
        )));
    }
    let mut fused = vec![0.0; n];
    for (&layer, &w) in selected.iter().zip(&weights) {
        for (out, &x) in fused.iter_mut().zip(&preds[layer]) {
            *out += w * x;
        }
    }
    Ok(fused)
}

/// Renormalized top-k fusion: the `k` highest-membership layers are averaged
/// with weights `p_i / Σ_topk p_j`, so the output remains a probability.
pub fn topk_fuse(preds: &[Vec<f64>], p: &[f64], k: usize) -> Result<Vec<f64>> {
    topk_fuse_with(preds, p, k, FusionMode::Renormalized)
}
