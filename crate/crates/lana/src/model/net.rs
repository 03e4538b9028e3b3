//! The forward pass: embedding, encoder stack, the two feature extractors,
//! and the pivot decoder stack.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AblationFlags, Batch, LanaHyper};
use crate::pivot::{attention, pc_ffn, pma_attention, AttnMask, PivotWeights};
use crate::tensor::{Array, Tape, Tensor};

/// Layer-norm stabilizer.
pub const LN_EPS: f64 = 1e-5;

/// Everything one forward pass produces.
pub struct ForwardOutput {
    /// `[B, S]` probability that the response at each position is correct.
    pub probs: Tensor,
    /// `[B, n_heads, S]` memory strengths, when the decay path is active.
    pub memory: Option<Tensor>,
    /// `[B, S, d_piv]` performance features, when the pivot block is active.
    pub perf: Option<Tensor>,
    /// `[B, S, d_model]` input to the last decoder layer's feed-forward
    /// block (pivot-conditioned or plain). `None` only for a model with zero
    /// decoder layers.
    pub ffn_input: Option<Tensor>,
}

struct Ctx<'a> {
    tape: &'a Tape,
    params: &'a BTreeMap<String, Tensor>,
    hyper: &'a LanaHyper,
    flags: AblationFlags,
    dropout: Option<(f64, &'a RefCell<ChaCha8Rng>)>,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("parameter {name:?} is not bound")))
    }

    /// Inverted dropout; identity when no rate/rng pair is active.
    fn drop(&self, x: &Tensor) -> Result<Tensor> {
        let Some((rate, rng)) = self.dropout else { return Ok(x.clone()) };
        let shape = x.shape();
        let keep = 1.0 - rate;
        let data: Vec<f64> = {
            let mut rng = rng.borrow_mut();
            (0..shape.iter().product())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
                .collect()
        };
        x.mul(&self.tape.constant(Array::new(shape, data)?))
    }
}

/// Affine map over the last axis: `x (..., D_in) -> (..., D_out)`.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let d_in = *shape
        .last()
        .ok_or_else(|| Error::contract("linear input must have a feature axis"))?;
    let lead: usize = shape[..shape.len() - 1].iter().product();
    let out = x.reshape(&[lead, d_in])?.matmul(w)?.add_bias(b)?;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(out.shape()[1]);
    out.reshape(&out_shape)
}

/// Same, without a bias term.
fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let d_in = *shape.last().unwrap();
    let lead: usize = shape[..shape.len() - 1].iter().product();
    let out = x.reshape(&[lead, d_in])?.matmul(w)?;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(out.shape()[1]);
    out.reshape(&out_shape)
}

fn linear_by_name(ctx: &Ctx, prefix: &str, x: &Tensor) -> Result<Tensor> {
    linear(x, ctx.p(&format!("{prefix}.w"))?, ctx.p(&format!("{prefix}.b"))?)
}

/// Multi-head attention with an optional privately projected positional
/// embedding added to queries and keys, and an optional decay pair
/// `(dis, m)` that switches the score computation to the decayed variant
/// (the module's own `theta` supplies the rate offset).
fn mha(
    ctx: &Ctx,
    prefix: &str,
    q_in: &Tensor,
    kv_in: &Tensor,
    pos: Option<&Tensor>,
    mask: &AttnMask,
    decay: Option<(&Arc<Array>, &Tensor)>,
) -> Result<Tensor> {
    let shape = q_in.shape();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let h = ctx.hyper.n_heads;
    let dh = d / h;

    let mut q = linear(q_in, ctx.p(&format!("{prefix}.wq"))?, ctx.p(&format!("{prefix}.bq"))?)?;
    let mut k = linear(kv_in, ctx.p(&format!("{prefix}.wk"))?, ctx.p(&format!("{prefix}.bk"))?)?;
    let v = linear(kv_in, ctx.p(&format!("{prefix}.wv"))?, ctx.p(&format!("{prefix}.bv"))?)?;

    if let Some(pos) = pos {
        let projected = project(pos, ctx.p(&format!("{prefix}.pos_w"))?)?;
        q = q.add(&projected)?;
        k = k.add(&projected)?;
    }

    let split = |x: &Tensor| -> Result<Tensor> {
        x.reshape(&[b, s, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, s, dh])
    };
    let (qh, kh, vh) = (split(&q)?, split(&k)?, split(&v)?);

    let att = match decay {
        Some((dis, m)) => {
            let theta = ctx.p(&format!("{prefix}.theta"))?;
            let m_flat = m.reshape(&[b * h, s])?;
            pma_attention(&qh, &kh, &vh, dis, &m_flat, theta, mask)?
        }
        None => attention(&qh, &kh, &vh, mask)?,
    };

    let merged = att.context.reshape(&[b, h, s, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, s, d])?;
    linear(&merged, ctx.p(&format!("{prefix}.wo"))?, ctx.p(&format!("{prefix}.bo"))?)
}

fn encoder_layer(
    ctx: &Ctx,
    i: usize,
    x: &Tensor,
    pos: Option<&Tensor>,
    mask: &AttnMask,
) -> Result<Tensor> {
    let attn = mha(ctx, &format!("enc.{i}.attn"), x, x, pos, mask, None)?;
    let x = x
        .add(&ctx.drop(&attn)?)?
        .layer_norm(ctx.p(&format!("enc.{i}.ln1.g"))?, ctx.p(&format!("enc.{i}.ln1.b"))?, LN_EPS)?;
    let hidden = linear_by_name(ctx, &format!("enc.{i}.ffn.l1"), &x)?.relu()?;
    let ffn = linear_by_name(ctx, &format!("enc.{i}.ffn.l2"), &hidden)?;
    x.add(&ctx.drop(&ffn)?)?
        .layer_norm(ctx.p(&format!("enc.{i}.ln2.g"))?, ctx.p(&format!("enc.{i}.ln2.b"))?, LN_EPS)
}

/// Feature extractor: one causal attention layer, then two linear maps with
/// a rectifier between them, shrinking `d_model` to the target width.
fn srfe(ctx: &Ctx, prefix: &str, enc_out: &Tensor, pos: Option<&Tensor>, mask: &AttnMask) -> Result<Tensor> {
    let attn = mha(ctx, &format!("{prefix}.attn"), enc_out, enc_out, pos, mask, None)?;
    let hidden = linear_by_name(ctx, &format!("{prefix}.lin1"), &attn)?.relu()?;
    linear_by_name(ctx, &format!("{prefix}.lin2"), &hidden)
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    ctx: &Ctx,
    i: usize,
    y: &Tensor,
    enc_out: &Tensor,
    memory: Option<&Tensor>,
    perf: Option<&Tensor>,
    pos: Option<&Tensor>,
    batch: &Batch,
) -> Result<(Tensor, Tensor)> {
    let mask = &batch.mask;
    let sa = mha(ctx, &format!("dec.{i}.self_attn"), y, y, pos, mask, None)?;
    let y = y
        .add(&ctx.drop(&sa)?)?
        .layer_norm(ctx.p(&format!("dec.{i}.ln1.g"))?, ctx.p(&format!("dec.{i}.ln1.b"))?, LN_EPS)?;

    let decay = memory.map(|m| (&batch.dis, m));
    let ca = mha(ctx, &format!("dec.{i}.cross"), &y, enc_out, pos, mask, decay)?;
    let ffn_in = y
        .add(&ctx.drop(&ca)?)?
        .layer_norm(ctx.p(&format!("dec.{i}.ln2.g"))?, ctx.p(&format!("dec.{i}.ln2.b"))?, LN_EPS)?;

    let y = match perf {
        Some(p) => {
            let inner = PivotWeights {
                w: ctx.p(&format!("dec.{i}.pcffn.p1.w"))?.clone(),
                b: ctx.p(&format!("dec.{i}.pcffn.p1.b"))?.clone(),
            };
            let outer = PivotWeights {
                w: ctx.p(&format!("dec.{i}.pcffn.p2.w"))?.clone(),
                b: ctx.p(&format!("dec.{i}.pcffn.p2.b"))?.clone(),
            };
            pc_ffn(&ffn_in, p, &inner, &outer, true)?
        }
        None => {
            let hidden = linear_by_name(ctx, &format!("dec.{i}.ffn.l1"), &ffn_in)?.relu()?;
            let ffn = linear_by_name(ctx, &format!("dec.{i}.ffn.l2"), &hidden)?;
            ffn_in.add(&ctx.drop(&ffn)?)?
        }
    };
    let out = y.layer_norm(
        ctx.p(&format!("dec.{i}.ln3.g"))?,
        ctx.p(&format!("dec.{i}.ln3.b"))?,
        LN_EPS,
    )?;
    Ok((out, ffn_in))
}

/// Runs the network over one batch.
///
/// `params` is a bound tensor map from [`crate::model::bind`]. Dropout fires
/// only when `hyper.dropout > 0` *and* an RNG is supplied; evaluation passes
/// `None` and is deterministic.
pub fn model_forward(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    hyper: &LanaHyper,
    flags: &AblationFlags,
    batch: &Batch,
    dropout_rng: Option<&RefCell<ChaCha8Rng>>,
) -> Result<ForwardOutput> {
    hyper.validate()?;
    if batch.seq_len != hyper.seq_len {
        return Err(Error::contract(format!(
            "batch seq_len {} does not match model seq_len {}",
            batch.seq_len, hyper.seq_len
        )));
    }
    let ctx = Ctx {
        tape,
        params,
        hyper,
        flags: *flags,
        dropout: match dropout_rng {
            Some(rng) if hyper.dropout > 0.0 => Some((hyper.dropout, rng)),
            _ => None,
        },
    };
    let (b, s, d) = (batch.batch_size, batch.seq_len, hyper.d_model);

    let emb = |name: &str, ids: &Arc<Vec<usize>>| -> Result<Tensor> {
        tape.embedding(ctx.p(&format!("emb.{name}"))?, ids.clone())?.reshape(&[b, s, d])
    };
    let pos = emb("pos", &batch.pos_ids)?;
    let question = emb("question", &batch.question_ids)?;
    let part = emb("part", &batch.part_ids)?;
    let prev = emb("prev_response", &batch.prev_response_ids)?;
    let elapsed = emb("elapsed", &batch.elapsed_ids)?;
    let interval = emb("interval", &batch.interval_ids)?;
    let prior = emb("prior_viewed", &batch.prior_viewed_ids)?;

    let (enc_x, dec_x, module_pos) = if ctx.flags.no_bm {
        let enc = question.add(&part)?.add(&pos)?;
        let dec = prev.add(&elapsed)?.add(&interval)?.add(&prior)?.add(&pos)?;
        (enc, dec, None)
    } else {
        let enc_cat = tape.concat_last(&[&question, &part])?;
        let dec_cat = tape.concat_last(&[&prev, &elapsed, &interval, &prior])?;
        let enc = linear_by_name(&ctx, "enc_in.proj", &enc_cat)?;
        let dec = linear_by_name(&ctx, "dec_in.proj", &dec_cat)?;
        (enc, dec, Some(pos))
    };
    let mut enc_out = ctx.drop(&enc_x)?;
    let dec_x = ctx.drop(&dec_x)?;

    for i in 0..hyper.n_encoder_layers {
        enc_out = encoder_layer(&ctx, i, &enc_out, module_pos.as_ref(), &batch.mask)?;
    }

    let memory = if ctx.flags.no_pma {
        None
    } else {
        let m = srfe(&ctx, "srfe_mem", &enc_out, module_pos.as_ref(), &batch.mask)?;
        Some(m.permute(&[0, 2, 1])?)
    };
    let perf = if ctx.flags.no_pcffn {
        None
    } else {
        Some(srfe(&ctx, "srfe_perf", &enc_out, module_pos.as_ref(), &batch.mask)?)
    };

    let mut y = dec_x;
    let mut ffn_input = None;
    for i in 0..hyper.n_decoder_layers {
        let (out, ffn_in) =
            decoder_layer(&ctx, i, &y, &enc_out, memory.as_ref(), perf.as_ref(), module_pos.as_ref(), batch)?;
        y = out;
        ffn_input = Some(ffn_in);
    }

    let logits = linear(&y, ctx.p("head.w")?, ctx.p("head.b")?)?;
    let probs = logits.reshape(&[b, s])?.sigmoid()?;
    Ok(ForwardOutput { probs, memory, perf, ffn_input })
}
