//! Adjoints for every recorded operation.

use super::ops::{self, axis_span, group_repeat, permute_copy, Op};
use super::Node;

/// Accumulates `contrib` into node `j`'s transient adjoint, lazily allocating
/// a zero buffer. No-op when the node does not require gradients.
fn add_into(
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    j: usize,
    contrib: impl FnOnce(&mut [f64]),
) {
    if !nodes[j].requires_grad {
        return;
    }
    let numel = nodes[j].value.numel();
    let buf = adj[j].get_or_insert_with(|| vec![0.0; numel]);
    contrib(buf);
}

/// Pushes the adjoint `g` of node `id` into that node's inputs.
///
/// Shapes were validated at construction, so the arithmetic here indexes
/// without re-checking.
pub(super) fn propagate(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the backward driver"),

        Op::MatMul { a, b } => {
            let sa = nodes[*a].value.shape();
            let (m, k) = (sa[0], sa[1]);
            let n = nodes[*b].value.shape()[1];
            add_into(nodes, adj, *a, |da| {
                ops::mm_nt(g, nodes[*b].value.data(), m, n, k, da);
            });
            add_into(nodes, adj, *b, |db| {
                ops::mm_tn(nodes[*a].value.data(), g, m, k, n, db);
            });
        }

        Op::Bmm { a, b } => {
            let sa = nodes[*a].value.shape();
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = nodes[*b].value.shape()[2];
            add_into(nodes, adj, *a, |da| {
                let bv = nodes[*b].value.data();
                for i in 0..bs {
                    ops::mm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
            });
            add_into(nodes, adj, *b, |db| {
                let av = nodes[*a].value.data();
                for i in 0..bs {
                    ops::mm_tn(
                        &av[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
            });
        }

        Op::Add { a, b } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            add_into(nodes, adj, *b, |db| {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }

        Op::Sub { a, b } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            add_into(nodes, adj, *b, |db| {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }

        Op::Mul { a, b } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), bv) in da.iter_mut().zip(g).zip(nodes[*b].value.data()) {
                    *d += gv * bv;
                }
            });
            add_into(nodes, adj, *b, |db| {
                for ((d, gv), av) in db.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    *d += gv * av;
                }
            });
        }

        Op::AddBias { a, b } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            let width = nodes[*b].value.numel();
            add_into(nodes, adj, *b, |db| {
                for (i, gv) in g.iter().enumerate() {
                    db[i % width] += gv;
                }
            });
        }

        Op::AddRows { a, b } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            let chunk = nodes[*b].value.numel();
            add_into(nodes, adj, *b, |db| {
                for (i, gv) in g.iter().enumerate() {
                    db[i % chunk] += gv;
                }
            });
        }

        Op::AddScalarT { a, s } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            add_into(nodes, adj, *s, |ds| {
                ds[0] += g.iter().sum::<f64>();
            });
        }

        Op::Scale { a, c } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            });
        }

        Op::AddConst { a } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }

        Op::Exp { a } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), ov) in da.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gv * ov;
                }
            });
        }

        Op::Ln { a } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    *d += gv / xv;
                }
            });
        }

        Op::Sigmoid { a } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), ov) in da.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gv * ov * (1.0 - ov);
                }
            });
        }

        Op::Relu { a } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            });
        }

        Op::Softplus { a } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), &xv) in da.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    let s = if xv >= 0.0 {
                        1.0 / (1.0 + (-xv).exp())
                    } else {
                        let e = xv.exp();
                        e / (1.0 + e)
                    };
                    *d += gv * s;
                }
            });
        }

        Op::Clamp { a, lo, hi } => {
            add_into(nodes, adj, *a, |da| {
                for ((d, gv), &xv) in da.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    if xv >= *lo && xv <= *hi {
                        *d += gv;
                    }
                }
            });
        }

        Op::SoftmaxLast { a } => {
            // The mask enters forward as an additive constant, so the adjoint
            // is the plain softmax Jacobian; exactly-zero outputs contribute
            // exactly-zero input gradients.
            let width = *node.value.shape().last().unwrap();
            let rows = node.value.numel() / width;
            add_into(nodes, adj, *a, |da| {
                let out = node.value.data();
                for r in 0..rows {
                    let s = &out[r * width..(r + 1) * width];
                    let gr = &g[r * width..(r + 1) * width];
                    let dot: f64 = s.iter().zip(gr).map(|(sv, gv)| sv * gv).sum();
                    let dr = &mut da[r * width..(r + 1) * width];
                    for k in 0..width {
                        dr[k] += s[k] * (gr[k] - dot);
                    }
                }
            });
        }

        Op::Concat { parts } => {
            let widths: Vec<usize> =
                parts.iter().map(|&p| *nodes[p].value.shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = node.value.numel() / total;
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                add_into(nodes, adj, p, |dp| {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        for (d, gv) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                });
                offset += w;
            }
        }

        Op::Slice { a, axis, start, len } => {
            let shape = nodes[*a].value.shape().to_vec();
            let span = axis_span(&shape, *axis);
            add_into(nodes, adj, *a, |da| {
                for o in 0..span.outer {
                    for i in 0..*len {
                        let dst = (o * span.axis_dim + start + i) * span.inner;
                        let src = (o * len + i) * span.inner;
                        for j in 0..span.inner {
                            da[dst + j] += g[src + j];
                        }
                    }
                }
            });
        }

        Op::Reshape { a } => {
            add_into(nodes, adj, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }

        Op::Permute { a, perm } => {
            let out_shape = node.value.shape().to_vec();
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            add_into(nodes, adj, *a, |da| {
                let back = permute_copy(g, &out_shape, &inv);
                for (d, gv) in da.iter_mut().zip(&back) {
                    *d += gv;
                }
            });
        }

        Op::Embedding { table, ids } => {
            let width = nodes[*table].value.shape()[1];
            add_into(nodes, adj, *table, |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * width..(r + 1) * width];
                    for (d, gv) in dt[id * width..(id + 1) * width].iter_mut().zip(src) {
                        *d += gv;
                    }
                }
            });
        }

        Op::SumAxis { a, axis } => {
            let shape = nodes[*a].value.shape().to_vec();
            let span = axis_span(&shape, *axis);
            add_into(nodes, adj, *a, |da| {
                for o in 0..span.outer {
                    for i in 0..span.axis_dim {
                        let dst = (o * span.axis_dim + i) * span.inner;
                        let src = o * span.inner;
                        for j in 0..span.inner {
                            da[dst + j] += g[src + j];
                        }
                    }
                }
            });
        }

        Op::SumAll { a } => {
            add_into(nodes, adj, *a, |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            });
        }

        Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
            let width = nodes[*gamma].value.numel();
            let rows = nodes[*x].value.numel() / width;
            let xv = nodes[*x].value.data();
            let gv = nodes[*gamma].value.data();
            add_into(nodes, adj, *gamma, |dg| {
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    for k in 0..width {
                        let xhat = (xv[r * width + k] - mu) * is;
                        dg[k] += g[r * width + k] * xhat;
                    }
                }
            });
            add_into(nodes, adj, *beta, |db| {
                for r in 0..rows {
                    for k in 0..width {
                        db[k] += g[r * width + k];
                    }
                }
            });
            add_into(nodes, adj, *x, |dx| {
                let wf = width as f64;
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for k in 0..width {
                        let dxhat = g[r * width + k] * gv[k];
                        let xhat = (xv[r * width + k] - mu) * is;
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= wf;
                    m2 /= wf;
                    for k in 0..width {
                        let dxhat = g[r * width + k] * gv[k];
                        let xhat = (xv[r * width + k] - mu) * is;
                        dx[r * width + k] += is * (dxhat - m1 - xhat * m2);
                    }
                }
            });
        }

        Op::Contract3 { w, p } => {
            let sw = nodes[*w].value.shape();
            let (dy, dx, dp) = (sw[0], sw[1], sw[2]);
            let n = nodes[*p].value.shape()[0];
            let pv = nodes[*p].value.data();
            let wv = nodes[*w].value.data();
            add_into(nodes, adj, *w, |dw| {
                for r in 0..n {
                    let prow = &pv[r * dp..(r + 1) * dp];
                    let grow = &g[r * dy * dx..(r + 1) * dy * dx];
                    for (gc, wrow) in grow.iter().zip(dw.chunks_exact_mut(dp)) {
                        for (d, &pk) in wrow.iter_mut().zip(prow) {
                            *d += gc * pk;
                        }
                    }
                }
            });
            add_into(nodes, adj, *p, |dpv| {
                for r in 0..n {
                    let grow = &g[r * dy * dx..(r + 1) * dy * dx];
                    let drow = &mut dpv[r * dp..(r + 1) * dp];
                    for (gc, wrow) in grow.iter().zip(wv.chunks_exact(dp)) {
                        for (d, &wk) in drow.iter_mut().zip(wrow) {
                            *d += gc * wk;
                        }
                    }
                }
            });
        }

        Op::BatchMatVec { m, x } => {
            let sm = nodes[*m].value.shape();
            let (n, dy, dx) = (sm[0], sm[1], sm[2]);
            let mv = nodes[*m].value.data();
            let xv = nodes[*x].value.data();
            add_into(nodes, adj, *m, |dm| {
                for r in 0..n {
                    let xrow = &xv[r * dx..(r + 1) * dx];
                    let grow = &g[r * dy..(r + 1) * dy];
                    let drows = &mut dm[r * dy * dx..(r + 1) * dy * dx];
                    for (i, &gi) in grow.iter().enumerate() {
                        for (d, &xj) in drows[i * dx..(i + 1) * dx].iter_mut().zip(xrow) {
                            *d += gi * xj;
                        }
                    }
                }
            });
            add_into(nodes, adj, *x, |dxv| {
                for r in 0..n {
                    let grow = &g[r * dy..(r + 1) * dy];
                    let mrows = &mv[r * dy * dx..(r + 1) * dy * dx];
                    let drow = &mut dxv[r * dx..(r + 1) * dx];
                    for (i, &gi) in grow.iter().enumerate() {
                        for (d, &mij) in drow.iter_mut().zip(&mrows[i * dx..(i + 1) * dx]) {
                            *d += gi * mij;
                        }
                    }
                }
            });
        }

        Op::PivotApply { w, b, x, p } => {
            let sw = nodes[*w].value.shape();
            let (dy, dx, dp) = (sw[0], sw[1], sw[2]);
            let n = nodes[*x].value.shape()[0];
            let wv = nodes[*w].value.data();
            let xv = nodes[*x].value.data();
            let pv = nodes[*p].value.data();
            add_into(nodes, adj, *w, |dw| {
                // dW[i,j,k] += g[n,i] x[n,j] p[n,k]
                for r in 0..n {
                    let grow = &g[r * dy..(r + 1) * dy];
                    let xrow = &xv[r * dx..(r + 1) * dx];
                    let prow = &pv[r * dp..(r + 1) * dp];
                    for (i, &gi) in grow.iter().enumerate() {
                        for (j, &xj) in xrow.iter().enumerate() {
                            let gx = gi * xj;
                            let cell = &mut dw[(i * dx + j) * dp..(i * dx + j + 1) * dp];
                            for (d, &pk) in cell.iter_mut().zip(prow) {
                                *d += gx * pk;
                            }
                        }
                    }
                }
            });
            add_into(nodes, adj, *b, |db| {
                for r in 0..n {
                    for (d, gv) in db.iter_mut().zip(&g[r * dy..(r + 1) * dy]) {
                        *d += gv;
                    }
                }
            });
            add_into(nodes, adj, *x, |dxv| {
                // dx[n,j] += sum_i g[n,i] M[n,i,j]; M is recomputed row by row.
                let mut mat = vec![0.0; dy * dx];
                for r in 0..n {
                    let prow = &pv[r * dp..(r + 1) * dp];
                    for (cell, wrow) in mat.iter_mut().zip(wv.chunks_exact(dp)) {
                        let mut acc = 0.0;
                        for (&wk, &pk) in wrow.iter().zip(prow) {
                            acc += wk * pk;
                        }
                        *cell = acc;
                    }
                    let grow = &g[r * dy..(r + 1) * dy];
                    let drow = &mut dxv[r * dx..(r + 1) * dx];
                    for (i, &gi) in grow.iter().enumerate() {
                        for (d, &mij) in drow.iter_mut().zip(&mat[i * dx..(i + 1) * dx]) {
                            *d += gi * mij;
                        }
                    }
                }
            });
            add_into(nodes, adj, *p, |dpv| {
                // dp[n,k] += sum_{i,j} g[n,i] w[i,j,k] x[n,j]
                for r in 0..n {
                    let grow = &g[r * dy..(r + 1) * dy];
                    let xrow = &xv[r * dx..(r + 1) * dx];
                    let drow = &mut dpv[r * dp..(r + 1) * dp];
                    for (i, &gi) in grow.iter().enumerate() {
                        for (j, &xj) in xrow.iter().enumerate() {
                            let gx = gi * xj;
                            let wrow = &wv[(i * dx + j) * dp..(i * dx + j + 1) * dp];
                            for (d, &wk) in drow.iter_mut().zip(wrow) {
                                *d += gx * wk;
                            }
                        }
                    }
                }
            });
        }

        Op::DecayLogits { rho, dis, cap } => {
            let sr = nodes[*rho].value.shape().to_vec();
            let repeat = group_repeat(node.value.shape(), dis.shape())
                .expect("shapes validated at construction");
            let (q, k) = (dis.shape()[1], dis.shape()[2]);
            let rv = nodes[*rho].value.data();
            add_into(nodes, adj, *rho, |dr| {
                for gi in 0..sr[0] {
                    let b = gi / repeat;
                    for qi in 0..q {
                        let r = rv[gi * q + qi];
                        let drow = &dis.data()[(b * q + qi) * k..(b * q + qi + 1) * k];
                        let grow = &g[(gi * q + qi) * k..(gi * q + qi + 1) * k];
                        let mut acc = 0.0;
                        for (&d, &gv) in drow.iter().zip(grow) {
                            if r * d < *cap {
                                acc -= d * gv;
                            }
                        }
                        dr[gi * q + qi] += acc;
                    }
                }
            });
        }
    }
}
