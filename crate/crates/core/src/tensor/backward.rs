//! Hand-written adjoints for every tape op.

use super::kernels;
use super::tape::{Node, Op, Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<S: Scalar> Tape<S> {
    /// Reverse-mode sweep seeded with `d(loss)/d(loss) = 1`.
    ///
    /// `loss` must be a single-element node. Gradients accumulate into every
    /// gradient-tracked node reachable from it; read them back with
    /// [`Tape::grad`] or [`Tape::accumulate_param_grads`]. Call once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            });
        }
        if !self.nodes[loss.0].requires {
            // Loss does not depend on any tracked leaf; all gradients are zero.
            return Ok(());
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires || grads[i].is_none() {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        for i in 0..n {
            self.nodes[i].grad = grads[i].take();
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                for &v in &[*a, *b] {
                    if let Some(g) = ensure(grads, nodes, v) {
                        for (d, &s) in g.iter_mut().zip(gout) {
                            *d = *d + s;
                        }
                    }
                }
            }

            Op::Mul { a, b } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * nodes[b.0].data[k];
                    }
                }
                if let Some(g) = ensure(grads, nodes, *b) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * nodes[a.0].data[k];
                    }
                }
            }

            Op::Scale { a, c } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (d, &s) in g.iter_mut().zip(gout) {
                        *d = *d + s * *c;
                    }
                }
            }

            Op::AddBias { a, bias } => {
                let cols = nodes[i].shape[1];
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (d, &s) in g.iter_mut().zip(gout) {
                        *d = *d + s;
                    }
                }
                if let Some(g) = ensure(grads, nodes, *bias) {
                    for (k, &s) in gout.iter().enumerate() {
                        g[k % cols] = g[k % cols] + s;
                    }
                }
            }

            Op::ScaleCols { a, s } => {
                let cols = nodes[i].shape[1];
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * nodes[s.0].data[k % cols];
                    }
                }
                if let Some(g) = ensure(grads, nodes, *s) {
                    for (k, &v) in gout.iter().enumerate() {
                        g[k % cols] = g[k % cols] + v * nodes[a.0].data[k];
                    }
                }
            }

            Op::MatMul { a, b } => {
                let m = nodes[a.0].shape[0];
                let k = nodes[a.0].shape[1];
                let nn = nodes[b.0].shape[1];
                if let Some(g) = ensure(grads, nodes, *a) {
                    // dA = G · Bᵀ
                    let bd = &nodes[b.0].data;
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for j in 0..nn {
                                acc = acc + gout[r * nn + j] * bd[p * nn + j];
                            }
                            g[r * k + p] = g[r * k + p] + acc;
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, *b) {
                    // dB = Aᵀ · G
                    let ad = &nodes[a.0].data;
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            for j in 0..nn {
                                g[p * nn + j] = g[p * nn + j] + av * gout[r * nn + j];
                            }
                        }
                    }
                }
            }

            Op::Softplus { a } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * kernels::sigmoid(nodes[a.0].data[k]);
                    }
                }
            }

            Op::Sigmoid { a } => {
                let y = &nodes[i].data;
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * y[k] * (S::one() - y[k]);
                    }
                }
            }

            Op::Silu { a } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        let x = nodes[a.0].data[k];
                        let s = kernels::sigmoid(x);
                        *d = *d + gout[k] * (s + x * s * (S::one() - s));
                    }
                }
            }

            Op::Exp { a } => {
                let y = &nodes[i].data;
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * y[k];
                    }
                }
            }

            Op::Phi { a } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (k, d) in g.iter_mut().enumerate() {
                        *d = *d + gout[k] * kernels::phi_prime(nodes[a.0].data[k]);
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let rows = nodes[i].shape[0];
                let cols = nodes[i].shape[1];
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                let inv_c = S::one() / S::c(cols as f64);
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_c;
                    let var =
                        row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
                    let rstd = S::one() / (var + *eps).sqrt();
                    if let Some(g) = ensure(grads, nodes, *beta) {
                        for c in 0..cols {
                            g[c] = g[c] + go[c];
                        }
                    }
                    if let Some(g) = ensure(grads, nodes, *gamma) {
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * rstd;
                            g[c] = g[c] + go[c] * xhat;
                        }
                    }
                    if nodes[x.0].requires {
                        let mut mu1 = S::zero();
                        let mut mu2 = S::zero();
                        for c in 0..cols {
                            let u = gd[c] * go[c];
                            let xhat = (row[c] - mean) * rstd;
                            mu1 = mu1 + u;
                            mu2 = mu2 + u * xhat;
                        }
                        mu1 = mu1 * inv_c;
                        mu2 = mu2 * inv_c;
                        let g = ensure(grads, nodes, *x).unwrap();
                        for c in 0..cols {
                            let u = gd[c] * go[c];
                            let xhat = (row[c] - mean) * rstd;
                            g[r * cols + c] = g[r * cols + c] + rstd * (u - mu1 - xhat * mu2);
                        }
                    }
                }
            }

            Op::RowGather { x, idx } => {
                let cols: usize = nodes[x.0].shape[1..].iter().product();
                if let Some(g) = ensure(grads, nodes, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        if j < 0 {
                            continue;
                        }
                        let dst = j as usize * cols;
                        for c in 0..cols {
                            g[dst + c] = g[dst + c] + gout[r * cols + c];
                        }
                    }
                }
            }

            Op::SegmentReduce { x, seg, counts, arg, mode } => {
                let cols: usize = nodes[x.0].shape[1..].iter().product();
                if let Some(g) = ensure(grads, nodes, *x) {
                    match mode {
                        Reduce::Mean => {
                            for (r, &grp) in seg.iter().enumerate() {
                                let inv = S::one() / S::c(counts[grp] as f64);
                                for c in 0..cols {
                                    g[r * cols + c] =
                                        g[r * cols + c] + gout[grp * cols + c] * inv;
                                }
                            }
                        }
                        Reduce::Max => {
                            for (slot, &r) in arg.iter().enumerate() {
                                if r == usize::MAX {
                                    continue;
                                }
                                let c = slot % cols;
                                g[r * cols + c] = g[r * cols + c] + gout[slot];
                            }
                        }
                    }
                }
            }

            Op::ConcatCols { a, b } => {
                let rows = nodes[i].shape[0];
                let ca = nodes[a.0].shape[1];
                let cb = nodes[b.0].shape[1];
                if let Some(g) = ensure(grads, nodes, *a) {
                    for r in 0..rows {
                        for c in 0..ca {
                            g[r * ca + c] = g[r * ca + c] + gout[r * (ca + cb) + c];
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, *b) {
                    for r in 0..rows {
                        for c in 0..cb {
                            g[r * cb + c] = g[r * cb + c] + gout[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }

            Op::SliceCols { a, start, len } => {
                let rows = nodes[i].shape[0];
                let cols = nodes[a.0].shape[1];
                if let Some(g) = ensure(grads, nodes, *a) {
                    for r in 0..rows {
                        for c in 0..*len {
                            g[r * cols + start + c] = g[r * cols + start + c] + gout[r * len + c];
                        }
                    }
                }
            }

            Op::Reshape { a } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for (d, &s) in g.iter_mut().zip(gout) {
                        *d = *d + s;
                    }
                }
            }

            Op::CausalConv1d { x, w, bias, segs } => {
                let rows = nodes[i].shape[0];
                let cols = nodes[i].shape[1];
                let width = nodes[w.0].shape[1];
                let xd = &nodes[x.0].data;
                let wd = &nodes[w.0].data;
                for (s0, s1) in kernels::segment_bounds(segs, rows) {
                    for t in s0..s1 {
                        let reach = (t - s0).min(width - 1);
                        for d in 0..cols {
                            let go = gout[t * cols + d];
                            if let Some(g) = ensure(grads, nodes, *x) {
                                for j in 0..=reach {
                                    g[(t - j) * cols + d] =
                                        g[(t - j) * cols + d] + wd[d * width + j] * go;
                                }
                            }
                            if let Some(g) = ensure(grads, nodes, *w) {
                                for j in 0..=reach {
                                    g[d * width + j] =
                                        g[d * width + j] + xd[(t - j) * cols + d] * go;
                                }
                            }
                            if let Some(g) = ensure(grads, nodes, *bias) {
                                g[d] = g[d] + go;
                            }
                        }
                    }
                }
            }

            Op::LinearScan { a, b, segs } => {
                // Adjoint of h_t = a_t h_{t-1} + b_t:
                //   g_t = dh_t + a_{t+1} g_{t+1};  db_t = g_t;  da_t = g_t h_{t-1}.
                let rows = nodes[i].shape[0];
                let cols: usize = nodes[i].shape[1..].iter().product();
                let ad = &nodes[a.0].data;
                let h = &nodes[i].data;
                let want_a = nodes[a.0].requires;
                let want_b = nodes[b.0].requires;
                let mut ga = vec![S::zero(); if want_a { rows * cols } else { 0 }];
                let mut gb = vec![S::zero(); if want_b { rows * cols } else { 0 }];
                for (s0, s1) in kernels::segment_bounds(segs, rows) {
                    for k in 0..cols {
                        let mut carry = S::zero();
                        for t in (s0..s1).rev() {
                            let cur = gout[t * cols + k]
                                + if t + 1 < s1 { ad[(t + 1) * cols + k] * carry } else { S::zero() };
                            if want_b {
                                gb[t * cols + k] = cur;
                            }
                            if want_a && t > s0 {
                                ga[t * cols + k] = cur * h[(t - 1) * cols + k];
                            }
                            carry = cur;
                        }
                    }
                }
                if want_a {
                    let g = ensure(grads, nodes, *a).unwrap();
                    for (d, s) in g.iter_mut().zip(ga) {
                        *d = *d + s;
                    }
                }
                if want_b {
                    let g = ensure(grads, nodes, *b).unwrap();
                    for (d, s) in g.iter_mut().zip(gb) {
                        *d = *d + s;
                    }
                }
            }

            Op::OuterLdDn { ld, dn } => {
                let (l, d, n) = (nodes[i].shape[0], nodes[i].shape[1], nodes[i].shape[2]);
                if let Some(g) = ensure(grads, nodes, *ld) {
                    for t in 0..l {
                        for dd in 0..d {
                            let mut acc = S::zero();
                            for nn in 0..n {
                                acc = acc + gout[(t * d + dd) * n + nn] * nodes[dn.0].data[dd * n + nn];
                            }
                            g[t * d + dd] = g[t * d + dd] + acc;
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, *dn) {
                    for t in 0..l {
                        for dd in 0..d {
                            let lv = nodes[ld.0].data[t * d + dd];
                            for nn in 0..n {
                                g[dd * n + nn] = g[dd * n + nn] + gout[(t * d + dd) * n + nn] * lv;
                            }
                        }
                    }
                }
            }

            Op::OuterLdLn { ld, ln } => {
                let (l, d, n) = (nodes[i].shape[0], nodes[i].shape[1], nodes[i].shape[2]);
                if let Some(g) = ensure(grads, nodes, *ld) {
                    for t in 0..l {
                        for dd in 0..d {
                            let mut acc = S::zero();
                            for nn in 0..n {
                                acc = acc + gout[(t * d + dd) * n + nn] * nodes[ln.0].data[t * n + nn];
                            }
                            g[t * d + dd] = g[t * d + dd] + acc;
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, *ln) {
                    for t in 0..l {
                        for nn in 0..n {
                            let mut acc = S::zero();
                            for dd in 0..d {
                                acc = acc + gout[(t * d + dd) * n + nn] * nodes[ld.0].data[t * d + dd];
                            }
                            g[t * n + nn] = g[t * n + nn] + acc;
                        }
                    }
                }
            }

            Op::ContractState { h, c } => {
                let (l, d, n) = (nodes[h.0].shape[0], nodes[h.0].shape[1], nodes[h.0].shape[2]);
                if let Some(g) = ensure(grads, nodes, *h) {
                    for t in 0..l {
                        for dd in 0..d {
                            let go = gout[t * d + dd];
                            for nn in 0..n {
                                g[(t * d + dd) * n + nn] =
                                    g[(t * d + dd) * n + nn] + go * nodes[c.0].data[t * n + nn];
                            }
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, *c) {
                    for t in 0..l {
                        for nn in 0..n {
                            let mut acc = S::zero();
                            for dd in 0..d {
                                acc = acc + gout[t * d + dd] * nodes[h.0].data[(t * d + dd) * n + nn];
                            }
                            g[t * n + nn] = g[t * n + nn] + acc;
                        }
                    }
                }
            }

            Op::CrossEntropy { logits, labels, ignore } => {
                let k = nodes[logits.0].shape[1];
                let count = labels.iter().filter(|&&y| y != *ignore).count();
                if count == 0 {
                    return;
                }
                let g0 = gout[0] / S::c(count as f64);
                if let Some(g) = ensure(grads, nodes, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        if y == *ignore {
                            continue;
                        }
                        let row = &nodes[logits.0].data[r * k..(r + 1) * k];
                        let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
                        let z = row.iter().fold(S::zero(), |a, &v| a + (v - m).exp());
                        for c in 0..k {
                            let p = (row[c] - m).exp() / z;
                            let delta = if c as i64 == y { S::one() } else { S::zero() };
                            g[r * k + c] = g[r * k + c] + g0 * (p - delta);
                        }
                    }
                }
            }

            Op::SumAll { a } => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    for d in g.iter_mut() {
                        *d = *d + gout[0];
                    }
                }
            }
        }
    }
}

fn ensure<'g, S: Scalar>(
    grads: &'g mut Vec<Option<Vec<S>>>,
    nodes: &[Node<S>],
    v: Var,
) -> Option<&'g mut Vec<S>> {
    if !nodes[v.0].requires {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].data.len()]))
}
