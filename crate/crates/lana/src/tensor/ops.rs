//! Operation records and their eager forward kernels.

use std::sync::Arc;

use super::{Array, Tape, Tensor};
use crate::error::{Error, Result};

/// How a node's value was produced. Input fields are node ids on the same
/// tape; auxiliary data (masks, index lists, saved statistics) is stored
/// inline so the backward pass needs nothing beyond the tape itself.
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    AddRows { a: usize, b: usize },
    AddScalarT { a: usize, s: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Softplus { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    SoftmaxLast { a: usize },
    Concat { parts: Vec<usize> },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Embedding { table: usize, ids: Arc<Vec<usize>> },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Contract3 { w: usize, p: usize },
    BatchMatVec { m: usize, x: usize },
    PivotApply { w: usize, b: usize, x: usize, p: usize },
    DecayLogits { rho: usize, dis: Arc<Array>, cap: f64 },
}

/// Largest argument `exp` accepts before overflowing to infinity.
const EXP_MAX: f64 = 709.78;

fn value_of<R>(t: &Tensor, f: impl FnOnce(&Array) -> R) -> R {
    t.with_value(f)
}

fn shape_of(t: &Tensor) -> Vec<usize> {
    t.shape()
}

fn grad_of(t: &Tensor) -> bool {
    t.requires_grad()
}

// ── dense kernels ───────────────────────────────────────────────────────────

/// `out[m,n] += a[m,k] b[k,n]`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] b[k,n]^T` (i.e. `g . b^T`).
pub(crate) fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T g[m,n]` (i.e. `a^T . g`).
pub(crate) fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ── builders ────────────────────────────────────────────────────────────────

pub(crate) fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (shape_of(a), shape_of(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::contract(format!("matmul shapes {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    value_of(a, |av| value_of(b, |bv| mm_nn(av.data(), bv.data(), m, k, n, &mut out)));
    let value = Array::new(vec![m, n], out)?;
    Ok(tape.push(Op::MatMul { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

pub(crate) fn bmm(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (shape_of(a), shape_of(b));
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(Error::contract(format!("bmm shapes {sa:?} x {sb:?}")));
    }
    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let mut out = vec![0.0; bs * m * n];
    value_of(a, |av| {
        value_of(b, |bv| {
            for i in 0..bs {
                mm_nn(
                    &av.data()[i * m * k..(i + 1) * m * k],
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        })
    });
    let value = Array::new(vec![bs, m, n], out)?;
    Ok(tape.push(Op::Bmm { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (shape_of(a), shape_of(b));
    if sa != sb {
        return Err(Error::contract(format!("{name} shapes {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

pub(crate) fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape("add", a, b)?;
    let data = value_of(a, |av| {
        value_of(b, |bv| av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect())
    });
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Add { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

pub(crate) fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape("sub", a, b)?;
    let data = value_of(a, |av| {
        value_of(b, |bv| av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect())
    });
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Sub { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

pub(crate) fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = same_shape("mul", a, b)?;
    let data = value_of(a, |av| {
        value_of(b, |bv| av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect())
    });
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Mul { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

pub(crate) fn add_bias(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (shape_of(a), shape_of(b));
    if sb.len() != 1 || sa.last() != Some(&sb[0]) {
        return Err(Error::contract(format!("add_bias shapes {sa:?} + {sb:?}")));
    }
    let width = sb[0];
    let data = value_of(a, |av| {
        value_of(b, |bv| {
            let mut out = av.data().to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bv.data()[i % width];
            }
            out
        })
    });
    let value = Array::new(sa, data)?;
    Ok(tape.push(Op::AddBias { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

pub(crate) fn add_rows(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (shape_of(a), shape_of(b));
    if sa.len() < 2 || sa[1..] != sb[..] {
        return Err(Error::contract(format!("add_rows shapes {sa:?} + {sb:?}")));
    }
    let chunk: usize = sb.iter().product();
    let data = value_of(a, |av| {
        value_of(b, |bv| {
            let mut out = av.data().to_vec();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bv.data()[i % chunk];
            }
            out
        })
    });
    let value = Array::new(sa, data)?;
    Ok(tape.push(Op::AddRows { a: a.id, b: b.id }, value, grad_of(a) || grad_of(b)))
}

pub(crate) fn add_scalar_t(tape: &Tape, a: &Tensor, s: &Tensor) -> Result<Tensor> {
    let ss = shape_of(s);
    if ss != [1] {
        return Err(Error::contract(format!("add_scalar_t addend must be [1], got {ss:?}")));
    }
    let sv = value_of(s, |v| v.data()[0]);
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|x| x + sv).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::AddScalarT { a: a.id, s: s.id }, value, grad_of(a) || grad_of(s)))
}

pub(crate) fn scale(tape: &Tape, a: &Tensor, c: f64) -> Result<Tensor> {
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|x| x * c).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Scale { a: a.id, c }, value, grad_of(a)))
}

pub(crate) fn add_const(tape: &Tape, a: &Tensor, c: f64) -> Result<Tensor> {
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|x| x + c).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::AddConst { a: a.id }, value, grad_of(a)))
}

pub(crate) fn exp(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let shape = shape_of(a);
    let data: Vec<f64> = value_of(a, |av| {
        for &x in av.data() {
            if !(x <= EXP_MAX) {
                return Err(Error::numeric(format!("exp overflow at input {x}")));
            }
        }
        Ok(av.data().iter().map(|x| x.exp()).collect())
    })?;
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Exp { a: a.id }, value, grad_of(a)))
}

pub(crate) fn ln(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let shape = shape_of(a);
    let data: Vec<f64> = value_of(a, |av| {
        for &x in av.data() {
            if !(x > 0.0) {
                return Err(Error::numeric(format!("ln of non-positive input {x}")));
            }
        }
        Ok(av.data().iter().map(|x| x.ln()).collect())
    })?;
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Ln { a: a.id }, value, grad_of(a)))
}

pub(crate) fn sigmoid(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|&x| stable_sigmoid(x)).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Sigmoid { a: a.id }, value, grad_of(a)))
}

pub(crate) fn relu(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|&x| x.max(0.0)).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Relu { a: a.id }, value, grad_of(a)))
}

pub(crate) fn softplus(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|&x| stable_softplus(x)).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Softplus { a: a.id }, value, grad_of(a)))
}

pub(crate) fn clamp(tape: &Tape, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::contract(format!("clamp bounds [{lo}, {hi}]")));
    }
    let shape = shape_of(a);
    let data = value_of(a, |av| av.data().iter().map(|x| x.max(lo).min(hi)).collect());
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::Clamp { a: a.id, lo, hi }, value, grad_of(a)))
}

/// Shared by forward and backward: how many consecutive groups of `rows`
/// share one slice of an auxiliary `[B,Q,K]` array.
pub(crate) fn group_repeat(a_shape: &[usize], aux_shape: &[usize]) -> Result<usize> {
    if a_shape.len() != 3 || aux_shape.len() != 3 {
        return Err(Error::contract(format!(
            "grouped op needs rank-3 shapes, got {a_shape:?} with aux {aux_shape:?}"
        )));
    }
    if a_shape[1] != aux_shape[1] || a_shape[2] != aux_shape[2] {
        return Err(Error::contract(format!(
            "trailing dims of {a_shape:?} and aux {aux_shape:?} differ"
        )));
    }
    if aux_shape[0] == 0 || a_shape[0] % aux_shape[0] != 0 {
        return Err(Error::contract(format!(
            "leading dim {} is not a multiple of aux leading dim {}",
            a_shape[0], aux_shape[0]
        )));
    }
    Ok(a_shape[0] / aux_shape[0])
}

pub(crate) fn softmax_last(tape: &Tape, a: &Tensor, mask: Option<Arc<Array>>) -> Result<Tensor> {
    let shape = shape_of(a);
    if shape.is_empty() {
        return Err(Error::contract("softmax needs rank >= 1"));
    }
    let width = *shape.last().unwrap();
    let repeat = match &mask {
        Some(m) if m.shape() == shape.as_slice() => 1,
        Some(m) => group_repeat(&shape, m.shape())?,
        None => 1,
    };
    let data = value_of(a, |av| {
        let rows = av.numel() / width;
        let mut out = vec![0.0; av.numel()];
        for r in 0..rows {
            let src = &av.data()[r * width..(r + 1) * width];
            let dst = &mut out[r * width..(r + 1) * width];
            let mrow: Option<&[f64]> = mask.as_deref().map(|m| {
                // Row r of a [G,Q,K] tensor is (g, q); its mask row is
                // (g / repeat, q) of the [B,Q,K] mask. A same-shape mask
                // maps row for row.
                let mr = if m.numel() == av.numel() {
                    r
                } else {
                    let q_rows = shape[1];
                    let (g, q) = (r / q_rows, r % q_rows);
                    (g / repeat) * q_rows + q
                };
                &m.data()[mr * width..(mr + 1) * width]
            });
            let logit = |k: usize| src[k] + mrow.map_or(0.0, |mr| mr[k]);
            let mut max = f64::NEG_INFINITY;
            for k in 0..width {
                max = max.max(logit(k));
            }
            let mut sum = 0.0;
            for k in 0..width {
                let e = (logit(k) - max).exp();
                dst[k] = e;
                sum += e;
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        out
    });
    let value = Array::new(shape, data)?;
    Ok(tape.push(Op::SoftmaxLast { a: a.id }, value, grad_of(a)))
}

pub(crate) fn concat_last(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("concat of zero tensors"));
    }
    let first = shape_of(parts[0]);
    let lead = &first[..first.len() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let s = shape_of(p);
        if s.len() != first.len() || &s[..s.len() - 1] != lead {
            return Err(Error::contract(format!(
                "concat leading dims differ: {first:?} vs {s:?}"
            )));
        }
        widths.push(*s.last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = vec![0.0; rows * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        value_of(p, |pv| {
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
        });
        offset += w;
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let value = Array::new(shape, out)?;
    let rg = parts.iter().any(|p| grad_of(p));
    Ok(tape.push(Op::Concat { parts: parts.iter().map(|p| p.id).collect() }, value, rg))
}

/// Iteration helper for strided slice/scatter along one axis.
pub(crate) struct AxisSpan {
    pub outer: usize,
    pub axis_dim: usize,
    pub inner: usize,
}

pub(crate) fn axis_span(shape: &[usize], axis: usize) -> AxisSpan {
    AxisSpan {
        outer: shape[..axis].iter().product(),
        axis_dim: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

pub(crate) fn slice(
    tape: &Tape,
    a: &Tensor,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor> {
    let shape = shape_of(a);
    if axis >= shape.len() {
        return Err(Error::contract(format!("slice axis {axis} out of range for {shape:?}")));
    }
    if len == 0 || start + len > shape[axis] {
        return Err(Error::contract(format!(
            "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
            start + len
        )));
    }
    let span = axis_span(&shape, axis);
    let mut out = vec![0.0; span.outer * len * span.inner];
    value_of(a, |av| {
        for o in 0..span.outer {
            for i in 0..len {
                let src = (o * span.axis_dim + start + i) * span.inner;
                let dst = (o * len + i) * span.inner;
                out[dst..dst + span.inner].copy_from_slice(&av.data()[src..src + span.inner]);
            }
        }
    });
    let mut new_shape = shape;
    new_shape[axis] = len;
    let value = Array::new(new_shape, out)?;
    Ok(tape.push(Op::Slice { a: a.id, axis, start, len }, value, grad_of(a)))
}

pub(crate) fn reshape(tape: &Tape, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let old = shape_of(a);
    let numel: usize = old.iter().product();
    let new_numel: usize = shape.iter().product();
    if shape.is_empty() || numel != new_numel {
        return Err(Error::contract(format!("reshape {old:?} -> {shape:?}")));
    }
    let data = value_of(a, |av| av.data().to_vec());
    let value = Array::new(shape.to_vec(), data)?;
    Ok(tape.push(Op::Reshape { a: a.id }, value, grad_of(a)))
}

/// Copies `src` (shape `shape`) into axis order `perm`.
pub(crate) fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut out_shape = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        out_shape[i] = shape[p];
    }
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut flat = 0;
        for (i, &ix) in idx.iter().enumerate() {
            flat += ix * src_strides[perm[i]];
        }
        *o = src[flat];
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

pub(crate) fn permute(tape: &Tape, a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = shape_of(a);
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::contract(format!("permute {perm:?} is not a permutation of 0..{rank}")));
    }
    let data = value_of(a, |av| permute_copy(av.data(), &shape, perm));
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let value = Array::new(out_shape, data)?;
    Ok(tape.push(Op::Permute { a: a.id, perm: perm.to_vec() }, value, grad_of(a)))
}

pub(crate) fn embedding(tape: &Tape, table: &Tensor, ids: Arc<Vec<usize>>) -> Result<Tensor> {
    let shape = shape_of(table);
    if shape.len() != 2 {
        return Err(Error::contract(format!("embedding table must be rank 2, got {shape:?}")));
    }
    if ids.is_empty() {
        return Err(Error::contract("embedding of zero indices"));
    }
    let (vocab, width) = (shape[0], shape[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::contract(format!(
            "embedding index {bad} out of range for vocabulary of {vocab}"
        )));
    }
    let mut out = vec![0.0; ids.len() * width];
    value_of(table, |tv| {
        for (r, &id) in ids.iter().enumerate() {
            out[r * width..(r + 1) * width].copy_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
    });
    let value = Array::new(vec![ids.len(), width], out)?;
    Ok(tape.push(Op::Embedding { table: table.id, ids }, value, grad_of(table)))
}

pub(crate) fn sum_axis(tape: &Tape, a: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = shape_of(a);
    if axis >= shape.len() {
        return Err(Error::contract(format!("sum axis {axis} out of range for {shape:?}")));
    }
    let span = axis_span(&shape, axis);
    let mut out = vec![0.0; span.outer * span.inner];
    value_of(a, |av| {
        for o in 0..span.outer {
            for i in 0..span.axis_dim {
                let src = (o * span.axis_dim + i) * span.inner;
                let dst = o * span.inner;
                for j in 0..span.inner {
                    out[dst + j] += av.data()[src + j];
                }
            }
        }
    });
    let mut new_shape: Vec<usize> = shape.clone();
    new_shape.remove(axis);
    if new_shape.is_empty() {
        new_shape.push(1);
    }
    let value = Array::new(new_shape, out)?;
    Ok(tape.push(Op::SumAxis { a: a.id, axis }, value, grad_of(a)))
}

pub(crate) fn sum_all(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let total = value_of(a, |av| av.data().iter().sum());
    let value = Array::scalar(total);
    Ok(tape.push(Op::SumAll { a: a.id }, value, grad_of(a)))
}

pub(crate) fn layer_norm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let shape = shape_of(x);
    let width = *shape.last().ok_or_else(|| Error::contract("layer_norm on empty shape"))?;
    if shape_of(gamma) != [width] || shape_of(beta) != [width] {
        return Err(Error::contract(format!(
            "layer_norm gamma/beta must be [{width}], got {:?} / {:?}",
            shape_of(gamma),
            shape_of(beta)
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::contract(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = shape.iter().product::<usize>() / width;
    let mut mean = vec![0.0; rows];
    let mut inv_std = vec![0.0; rows];
    let data = value_of(x, |xv| {
        value_of(gamma, |gv| {
            value_of(beta, |bv| {
                let mut out = vec![0.0; xv.numel()];
                for r in 0..rows {
                    let row = &xv.data()[r * width..(r + 1) * width];
                    let mu = row.iter().sum::<f64>() / width as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    mean[r] = mu;
                    inv_std[r] = is;
                    let dst = &mut out[r * width..(r + 1) * width];
                    for k in 0..width {
                        dst[k] = (row[k] - mu) * is * gv.data()[k] + bv.data()[k];
                    }
                }
                out
            })
        })
    });
    let value = Array::new(shape, data)?;
    let rg = grad_of(x) || grad_of(gamma) || grad_of(beta);
    Ok(tape.push(
        Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, mean, inv_std },
        value,
        rg,
    ))
}

pub(crate) fn contract3(tape: &Tape, w: &Tensor, p: &Tensor) -> Result<Tensor> {
    let (sw, sp) = (shape_of(w), shape_of(p));
    if sw.len() != 3 || sp.len() != 2 || sw[2] != sp[1] {
        return Err(Error::contract(format!("contract3 shapes {sw:?} with pivots {sp:?}")));
    }
    let (dy, dx, dp, n) = (sw[0], sw[1], sw[2], sp[0]);
    let mut out = vec![0.0; n * dy * dx];
    value_of(w, |wv| {
        value_of(p, |pv| {
            for r in 0..n {
                let prow = &pv.data()[r * dp..(r + 1) * dp];
                let dst = &mut out[r * dy * dx..(r + 1) * dy * dx];
                for (cell, wrow) in dst.iter_mut().zip(wv.data().chunks_exact(dp)) {
                    let mut acc = 0.0;
                    for (&wk, &pk) in wrow.iter().zip(prow) {
                        acc += wk * pk;
                    }
                    *cell = acc;
                }
            }
        })
    });
    let value = Array::new(vec![n, dy, dx], out)?;
    Ok(tape.push(Op::Contract3 { w: w.id, p: p.id }, value, grad_of(w) || grad_of(p)))
}

pub(crate) fn batch_matvec(tape: &Tape, m: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (sm, sx) = (shape_of(m), shape_of(x));
    if sm.len() != 3 || sx.len() != 2 || sm[0] != sx[0] || sm[2] != sx[1] {
        return Err(Error::contract(format!("batch_matvec shapes {sm:?} with {sx:?}")));
    }
    let (n, dy, dx) = (sm[0], sm[1], sm[2]);
    let mut out = vec![0.0; n * dy];
    value_of(m, |mv| {
        value_of(x, |xv| {
            for r in 0..n {
                let xrow = &xv.data()[r * dx..(r + 1) * dx];
                let mrows = &mv.data()[r * dy * dx..(r + 1) * dy * dx];
                let dst = &mut out[r * dy..(r + 1) * dy];
                for (o, mrow) in dst.iter_mut().zip(mrows.chunks_exact(dx)) {
                    let mut acc = 0.0;
                    for (&mvv, &xvv) in mrow.iter().zip(xrow) {
                        acc += mvv * xvv;
                    }
                    *o = acc;
                }
            }
        })
    });
    let value = Array::new(vec![n, dy], out)?;
    Ok(tape.push(Op::BatchMatVec { m: m.id, x: x.id }, value, grad_of(m) || grad_of(x)))
}

/// Forward kernel shared with the backward pass's recomputation step:
/// `out[n,i] = sum_j (sum_k w[i,j,k] p[n,k]) x[n,j] + b[i]`.
pub(crate) fn pivot_apply_kernel(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    p: &[f64],
    n: usize,
    dy: usize,
    dx: usize,
    dp: usize,
    out: &mut [f64],
) {
    let mut mat = vec![0.0; dy * dx];
    for r in 0..n {
        let prow = &p[r * dp..(r + 1) * dp];
        let xrow = &x[r * dx..(r + 1) * dx];
        for (cell, wrow) in mat.iter_mut().zip(w.chunks_exact(dp)) {
            let mut acc = 0.0;
            for (&wk, &pk) in wrow.iter().zip(prow) {
                acc += wk * pk;
            }
            *cell = acc;
        }
        let dst = &mut out[r * dy..(r + 1) * dy];
        for (i, o) in dst.iter_mut().enumerate() {
            let mrow = &mat[i * dx..(i + 1) * dx];
            let mut acc = b[i];
            for (&mvv, &xvv) in mrow.iter().zip(xrow) {
                acc += mvv * xvv;
            }
            *o = acc;
        }
    }
}

pub(crate) fn pivot_apply(
    tape: &Tape,
    w: &Tensor,
    b: &Tensor,
    x: &Tensor,
    p: &Tensor,
) -> Result<Tensor> {
    let (sw, sb, sx, sp) = (shape_of(w), shape_of(b), shape_of(x), shape_of(p));
    if sw.len() != 3 || sb.len() != 1 || sx.len() != 2 || sp.len() != 2 {
        return Err(Error::contract(format!(
            "pivot_apply ranks: w {sw:?}, b {sb:?}, x {sx:?}, p {sp:?}"
        )));
    }
    let (dy, dx, dp) = (sw[0], sw[1], sw[2]);
    let n = sx[0];
    if sb[0] != dy || sx[1] != dx || sp != [n, dp] {
        return Err(Error::contract(format!(
            "pivot_apply shapes: w {sw:?}, b {sb:?}, x {sx:?}, p {sp:?}"
        )));
    }
    let mut out = vec![0.0; n * dy];
    value_of(w, |wv| {
        value_of(b, |bv| {
            value_of(x, |xv| {
                value_of(p, |pv| {
                    pivot_apply_kernel(
                        wv.data(),
                        bv.data(),
                        xv.data(),
                        pv.data(),
                        n,
                        dy,
                        dx,
                        dp,
                        &mut out,
                    )
                })
            })
        })
    });
    let value = Array::new(vec![n, dy], out)?;
    let rg = grad_of(w) || grad_of(b) || grad_of(x) || grad_of(p);
    Ok(tape.push(Op::PivotApply { w: w.id, b: b.id, x: x.id, p: p.id }, value, rg))
}

pub(crate) fn decay_logits(tape: &Tape, rho: &Tensor, dis: &Arc<Array>, cap: f64) -> Result<Tensor> {
    let sr = shape_of(rho);
    let sd = dis.shape();
    if sr.len() != 2 || sd.len() != 3 || sr[1] != sd[1] {
        return Err(Error::contract(format!(
            "decay_logits shapes: rho {sr:?} with dis {sd:?}"
        )));
    }
    if !(cap > 0.0) {
        return Err(Error::contract(format!("decay cap must be positive, got {cap}")));
    }
    let (g_total, q, k) = (sr[0], sd[1], sd[2]);
    if sd[0] == 0 || g_total % sd[0] != 0 {
        return Err(Error::contract(format!(
            "rho groups {g_total} not a multiple of dis batches {}",
            sd[0]
        )));
    }
    let repeat = g_total / sd[0];
    let mut out = vec![0.0; g_total * q * k];
    value_of(rho, |rv| {
        for g in 0..g_total {
            let b = g / repeat;
            for qi in 0..q {
                let r = rv.data()[g * q + qi];
                let drow = &dis.data()[(b * q + qi) * k..(b * q + qi + 1) * k];
                let orow = &mut out[(g * q + qi) * k..(g * q + qi + 1) * k];
                for (o, &d) in orow.iter_mut().zip(drow) {
                    *o = -(r * d).min(cap);
                }
            }
        }
    });
    let value = Array::new(vec![g_total, q, k], out)?;
    Ok(tape.push(Op::DecayLogits { rho: rho.id, dis: dis.clone(), cap }, value, grad_of(rho)))
}
