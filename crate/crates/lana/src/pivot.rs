//! Pivot-conditioned operators: `pivot_linear`, decay-aware attention, and
//! the pivot-conditioned feed-forward block.
//!
//! A *pivot* is a per-position conditioning vector `p`. `pivot_linear`
//! applies a weight matrix that is itself a linear function of `p`, so every
//! position gets its own effective weights; the attention variant lets
//! per-query decay rates discount keys by how many minutes ago they
//! happened.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

/// Exponent cap for decay penalties: `rho * dis` saturates here so weights
/// stay finite and non-zero for distances up to 1e9 minutes.
pub const DECAY_CAP: f64 = 30.0;

/// Weights of one pivot-conditioned linear map: `w` has shape
/// `[D_y, D_x, D_p]` and `b` has shape `[D_y]`.
#[derive(Clone)]
pub struct PivotWeights {
    pub w: Tensor,
    pub b: Tensor,
}

/// Additive attention mask plus (optionally) which query rows are real.
///
/// `bias` has shape `[B, S_q, S_k]` with `0.0` for allowed pairs and `-1e9`
/// for excluded ones. When `query_valid` is present (flattened `[B * S_q]`),
/// attention ops reject masks that exclude every key of a valid query; rows
/// of pad queries may be fully excluded and produce garbage that callers
/// mask out downstream.
#[derive(Clone)]
pub struct AttnMask {
    pub bias: Arc<Array>,
    pub query_valid: Option<Vec<bool>>,
}

/// Mask entry for excluded positions.
pub const MASK_EXCLUDED: f64 = -1e9;

impl AttnMask {
    /// Causal mask over `seq` positions, repeated for `batch` entries:
    /// query `j` may attend to keys `k <= j`.
    pub fn causal(batch: usize, seq: usize) -> Self {
        let mut bias = Array::zeros(&[batch, seq, seq]);
        for b in 0..batch {
            for j in 0..seq {
                for k in (j + 1)..seq {
                    bias.data_mut()[(b * seq + j) * seq + k] = MASK_EXCLUDED;
                }
            }
        }
        AttnMask { bias: Arc::new(bias), query_valid: None }
    }

    fn is_allowed(&self, flat: usize) -> bool {
        self.bias.data()[flat] > MASK_EXCLUDED / 2.0
    }

    /// Checks that every valid query keeps at least one key, and that `dis`
    /// (when given) is non-negative wherever the mask allows attention.
    fn validate(&self, dis: Option<&Array>) -> Result<()> {
        let shape = self.bias.shape();
        let (b_total, s_q, s_k) = (shape[0], shape[1], shape[2]);
        if let Some(d) = dis {
            if d.shape() != shape {
                return Err(Error::contract(format!(
                    "dis shape {:?} does not match mask shape {shape:?}",
                    d.shape()
                )));
            }
        }
        for b in 0..b_total {
            for j in 0..s_q {
                let row = (b * s_q + j) * s_k;
                let mut any_allowed = false;
                for k in 0..s_k {
                    if self.is_allowed(row + k) {
                        any_allowed = true;
                        if let Some(d) = dis {
                            if d.data()[row + k] < 0.0 {
                                return Err(Error::contract(format!(
                                    "negative distance {} at batch {b}, query {j}, key {k}",
                                    d.data()[row + k]
                                )));
                            }
                        }
                    }
                }
                let valid = self
                    .query_valid
                    .as_ref()
                    .map_or(true, |qv| qv[b * s_q + j]);
                if valid && !any_allowed {
                    return Err(Error::contract(format!(
                        "every key is masked for valid query {j} of batch {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Attention output: the mixed values and the weights that produced them.
#[derive(Debug)]
pub struct Attention {
    /// `[G, S_q, d_head]`
    pub context: Tensor,
    /// `[G, S_q, S_k]`, rows summing to 1 over allowed keys.
    pub weights: Tensor,
}

fn flatten_leading(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::contract(format!(
            "expected leading axes plus a feature axis, got shape {shape:?}"
        )));
    }
    let lead = shape[..shape.len() - 1].to_vec();
    let n: usize = lead.iter().product();
    Ok((x.reshape(&[n, *shape.last().unwrap()])?, lead))
}

/// Applies a pivot-conditioned linear map position by position:
/// `y = (sum_k w[:, :, k] * p[k]) x + b`.
///
/// `x` is `(..., D_x)` and `p` is `(..., D_p)` with identical leading axes;
/// the result is `(..., D_y)`.
pub fn pivot_linear(x: &Tensor, p: &Tensor, weights: &PivotWeights) -> Result<Tensor> {
    let (xf, lead_x) = flatten_leading(x)?;
    let (pf, lead_p) = flatten_leading(p)?;
    if lead_x != lead_p {
        return Err(Error::contract(format!(
            "x leading axes {lead_x:?} do not match p leading axes {lead_p:?}"
        )));
    }
    let out = weights.w.pivot_apply(&weights.b, &xf, &pf)?;
    let d_y = out.shape()[1];
    let mut shape = lead_x;
    shape.push(d_y);
    out.reshape(&shape)
}

fn scaled_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d_head = *q.shape().last().ok_or_else(|| Error::contract("scalar q"))?;
    q.bmm(&k.permute(&[0, 2, 1])?)?.scale(1.0 / (d_head as f64).sqrt())
}

/// Plain masked scaled-dot-product attention over `[G, S, d_head]` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttnMask) -> Result<Attention> {
    mask.validate(None)?;
    let weights = scaled_scores(q, k)?.softmax_masked(&mask.bias)?;
    let context = weights.bmm(v)?;
    Ok(Attention { context, weights })
}

/// Decay-aware attention: keys are discounted by
/// `exp(-rho_{g,j} * dis[j,k])` with a learned per-query rate
/// `rho = softplus(theta + m)`, and the discounted weights are renormalized
/// into a distribution.
///
/// - `q`, `k`, `v`: `[G, S, d_head]` with `G` a multiple of the mask batch.
/// - `dis`: `[B, S_q, S_k]` minutes between interactions, non-negative
///   wherever the mask allows attention.
/// - `m`: `[G, S_q]` memory strengths; `theta`: `[1]` shared offset.
///
/// Implemented as `softmax(scores + mask_bias - min(rho * dis, DECAY_CAP))`,
/// which equals the renormalized product of `exp(-rho * dis)` with the plain
/// attention distribution (the shared softmax denominator cancels) but never
/// underflows, keeps masked keys at exactly 0, and reduces bit-for-bit to
/// [`attention`] when `dis` is identically zero.
pub fn pma_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dis: &Arc<Array>,
    m: &Tensor,
    theta: &Tensor,
    mask: &AttnMask,
) -> Result<Attention> {
    mask.validate(Some(dis))?;
    let rho = m.add_scalar_t(theta)?.softplus()?;
    let decay = rho.decay_logits(dis, DECAY_CAP)?;
    let weights = scaled_scores(q, k)?.add(&decay)?.softmax_masked(&mask.bias)?;
    let context = weights.bmm(v)?;
    Ok(Attention { context, weights })
}

/// The literal decayed form kept for comparison: the decay multiplies the
/// plain attention distribution and rows are *not* renormalized, so they sum
/// to at most 1.
pub fn pma_attention_literal(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dis: &Arc<Array>,
    m: &Tensor,
    theta: &Tensor,
    mask: &AttnMask,
) -> Result<Attention> {
    mask.validate(Some(dis))?;
    let rho = m.add_scalar_t(theta)?.softplus()?;
    let decay = rho.decay_logits(dis, DECAY_CAP)?.exp()?;
    let base = scaled_scores(q, k)?.softmax_masked(&mask.bias)?;
    let weights = base.mul(&decay)?;
    let context = weights.bmm(v)?;
    Ok(Attention { context, weights })
}

/// Pivot-conditioned feed-forward block:
/// `x + pivot_linear(rectifier(pivot_linear(x, p)), p)`.
///
/// `rectifier = false` removes the inner ReLU, leaving the literal affine
/// composition for comparison runs. The outer map must produce `x`'s width
/// so the residual addition is well-formed.
pub fn pc_ffn(
    x: &Tensor,
    p: &Tensor,
    inner: &PivotWeights,
    outer: &PivotWeights,
    rectifier: bool,
) -> Result<Tensor> {
    let hidden = pivot_linear(x, p, inner)?;
    let hidden = if rectifier { hidden.relu()? } else { hidden };
    let out = pivot_linear(&hidden, p, outer)?;
    if out.shape() != x.shape() {
        return Err(Error::contract(format!(
            "residual shapes differ: input {:?} vs pivot output {:?}",
            x.shape(),
            out.shape()
        )));
    }
    x.add(&out)
}
