//! Reverse-mode autodiff tape.
//!
//! Ops append nodes holding their forward value; `backward` replays the tape
//! in reverse creation order, which is a valid topological order because an
//! op can only reference earlier nodes. There is no fusion and no implicit
//! broadcasting: every operation the network needs exists as an explicit op
//! with a hand-written adjoint, so each one can be finite-difference checked
//! in isolation.

use super::kernels;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Reduce {
    Mean,
    Max,
}

#[derive(Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    AddBias { a: Var, bias: Var },
    ScaleCols { a: Var, s: Var },
    MatMul { a: Var, b: Var },
    Softplus { a: Var },
    Sigmoid { a: Var },
    Silu { a: Var },
    Exp { a: Var },
    Phi { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    RowGather { x: Var, idx: Arc<Vec<i64>> },
    SegmentReduce { x: Var, seg: Arc<Vec<usize>>, counts: Vec<usize>, arg: Vec<usize>, mode: Reduce },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, start: usize, len: usize },
    Reshape { a: Var },
    CausalConv1d { x: Var, w: Var, bias: Var, segs: Arc<Vec<usize>> },
    LinearScan { a: Var, b: Var, segs: Arc<Vec<usize>> },
    OuterLdDn { ld: Var, dn: Var },
    OuterLdLn { ld: Var, ln: Var },
    ContractState { h: Var, c: Var },
    CrossEntropy { logits: Var, labels: Arc<Vec<i64>>, ignore: i64 },
    SumAll { a: Var },
}

#[derive(Debug)]
pub(crate) struct Node<S: Scalar> {
    pub(crate) op: Op<S>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) requires: bool,
    pub(crate) param: Option<String>,
}

/// Growable record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("tape node is always a valid tensor")
    }

    /// Gradient of the last `backward` with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Record a constant input (no gradient tracking).
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push_unchecked(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    /// Record a gradient-tracked leaf that is not tied to a parameter store.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push_unchecked(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true, None)
    }

    /// Record a named parameter as a gradient-tracked leaf.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        Ok(self.push_unchecked(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
            Some(name.to_string()),
        ))
    }

    /// After `backward`, add every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        for node in &self.nodes {
            let (Some(name), Some(grad)) = (&node.param, &node.grad) else { continue };
            let t = store.get_mut(name)?;
            if t.shape() != node.shape.as_slice() {
                return Err(Error::Shape {
                    op: "accumulate_param_grads",
                    detail: format!("parameter {name} changed shape"),
                });
            }
            let g = t.grad_mut();
            for (dst, src) in g.iter_mut().zip(grad.iter()) {
                *dst = *dst + *src;
            }
        }
        Ok(())
    }

    fn push_unchecked(
        &mut self,
        op: Op<S>,
        shape: Vec<usize>,
        data: Vec<S>,
        requires: bool,
        param: Option<String>,
    ) -> Var {
        self.nodes.push(Node { op, shape, data, grad: None, requires, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op<S>, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name, index: i });
        }
        let requires = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires);
        Ok(self.push_unchecked(op, shape, data, requires, None))
    }

    fn req2(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.nodes[v.0].shape.len() != rank {
            return Err(Error::Shape {
                op,
                detail: format!("expected rank {rank}, got shape {:?}", self.nodes[v.0].shape),
            });
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        self.push("add", Op::Add { a, b }, self.nodes[a.0].shape.clone(), data)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        self.push("mul", Op::Mul { a, b }, self.nodes[a.0].shape.clone(), data)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        self.push("scale", Op::Scale { a, c }, self.nodes[a.0].shape.clone(), data)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| kernels::softplus(x)).collect();
        self.push("softplus", Op::Softplus { a }, self.nodes[a.0].shape.clone(), data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push("sigmoid", Op::Sigmoid { a }, self.nodes[a.0].shape.clone(), data)
    }

    /// Sigmoid-weighted linear unit `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| x * kernels::sigmoid(x)).collect();
        self.push("silu", Op::Silu { a }, self.nodes[a.0].shape.clone(), data)
    }

    /// Gated product `x · σ(z)`.
    pub fn gate(&mut self, x: Var, z: Var) -> Result<Var> {
        let s = self.sigmoid(z)?;
        self.mul(x, s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        self.push("exp", Op::Exp { a }, self.nodes[a.0].shape.clone(), data)
    }

    /// `(e^x − 1)/x` elementwise; see `kernels::phi` for the series branch.
    pub fn phi(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| kernels::phi(x)).collect();
        self.push("phi", Op::Phi { a }, self.nodes[a.0].shape.clone(), data)
    }

    // ---- rank-2 linear algebra -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.req2("matmul", a, 2)?;
        self.req2("matmul", b, 2)?;
        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let (k2, n) = (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1]);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m},{k}] x [{k2},{n}]: inner extents differ"),
            });
        }
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push("matmul", Op::MatMul { a, b }, vec![m, n], data)
    }

    /// `x[r,c] + bias[c]`, bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.req2("add_bias", a, 2)?;
        self.req2("add_bias", bias, 1)?;
        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if self.nodes[bias.0].shape[0] != cols {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias len {} vs {cols} columns", self.nodes[bias.0].shape[0]),
            });
        }
        let b = &self.nodes[bias.0].data;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(self.nodes[a.0].data[r * cols + c] + b[c]);
            }
        }
        self.push("add_bias", Op::AddBias { a, bias }, vec![rows, cols], data)
    }

    /// `x[r,c] · s[c]`, a per-column scale broadcast over rows.
    pub fn scale_cols(&mut self, a: Var, s: Var) -> Result<Var> {
        self.req2("scale_cols", a, 2)?;
        self.req2("scale_cols", s, 1)?;
        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if self.nodes[s.0].shape[0] != cols {
            return Err(Error::Shape {
                op: "scale_cols",
                detail: format!("scale len {} vs {cols} columns", self.nodes[s.0].shape[0]),
            });
        }
        let sv = &self.nodes[s.0].data;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(self.nodes[a.0].data[r * cols + c] * sv[c]);
            }
        }
        self.push("scale_cols", Op::ScaleCols { a, s }, vec![rows, cols], data)
    }

    /// Per-row normalization over the channel axis with learnable scale and
    /// shift: `y = (x − mean)/sqrt(var + eps) · gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        self.req2("layer_norm", x, 2)?;
        self.req2("layer_norm", gamma, 1)?;
        self.req2("layer_norm", beta, 1)?;
        if eps <= S::zero() {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        if self.nodes[gamma.0].shape[0] != cols || self.nodes[beta.0].shape[0] != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("gamma/beta must have {cols} entries"),
            });
        }
        let xa = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let bt = &self.nodes[beta.0].data;
        let inv_c = S::one() / S::c(cols as f64);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xa[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
            let rstd = S::one() / (var + eps).sqrt();
            for c in 0..cols {
                data.push((row[c] - mean) * rstd * g[c] + bt[c]);
            }
        }
        self.push("layer_norm", Op::LayerNorm { x, gamma, beta, eps }, vec![rows, cols], data)
    }

    // ---- indexed movement --------------------------------------------------

    /// Gather rows of `x` by index; an index of −1 yields a zero row. The
    /// adjoint is scatter-add, so duplicated indices accumulate.
    pub fn row_gather(&mut self, x: Var, idx: Arc<Vec<i64>>) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.is_empty() {
            return Err(Error::Shape { op: "row_gather", detail: "rank 0 input".into() });
        }
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        for (i, &j) in idx.iter().enumerate() {
            if j >= rows as i64 || j < -1 {
                return Err(Error::Range(format!(
                    "row_gather index {j} at position {i} out of range for {rows} rows"
                )));
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let mut data = vec![S::zero(); idx.len() * cols];
        for (i, &j) in idx.iter().enumerate() {
            if j >= 0 {
                let src = &self.nodes[x.0].data[j as usize * cols..(j as usize + 1) * cols];
                data[i * cols..(i + 1) * cols].copy_from_slice(src);
            }
        }
        self.push("row_gather", Op::RowGather { x, idx }, out_shape, data)
    }

    /// Mean of rows grouped by `seg[r] ∈ [0, n_out)`.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols("segment_mean", x, &seg, n_out)?;
        let _ = rows;
        let (data, counts) = kernels::segment_mean(&self.nodes[x.0].data, &seg, n_out, cols);
        let mut out_shape = self.nodes[x.0].shape.clone();
        out_shape[0] = n_out;
        self.push(
            "segment_mean",
            Op::SegmentReduce { x, seg, counts, arg: Vec::new(), mode: Reduce::Mean },
            out_shape,
            data,
        )
    }

    /// Per-column max of rows grouped by `seg[r]`; ties keep the first row.
    pub fn segment_max(&mut self, x: Var, seg: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let (_rows, cols) = self.rows_cols("segment_max", x, &seg, n_out)?;
        let (data, arg) = kernels::segment_max(&self.nodes[x.0].data, &seg, n_out, cols);
        let mut out_shape = self.nodes[x.0].shape.clone();
        out_shape[0] = n_out;
        self.push(
            "segment_max",
            Op::SegmentReduce { x, seg, counts: Vec::new(), arg, mode: Reduce::Max },
            out_shape,
            data,
        )
    }

    fn rows_cols(
        &self,
        op: &'static str,
        x: Var,
        seg: &[usize],
        n_out: usize,
    ) -> Result<(usize, usize)> {
        let shape = &self.nodes[x.0].shape;
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        if seg.len() != rows {
            return Err(Error::Shape {
                op,
                detail: format!("segment map has {} entries for {rows} rows", seg.len()),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&g| g >= n_out) {
            return Err(Error::Range(format!("{op}: group id {bad} >= {n_out}")));
        }
        Ok((rows, cols))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.req2("concat_cols", a, 2)?;
        self.req2("concat_cols", b, 2)?;
        let (ra, ca) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let (rb, cb) = (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1]);
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("row counts differ: {ra} vs {rb}"),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        self.push("concat_cols", Op::ConcatCols { a, b }, vec![ra, ca + cb], data)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.req2("slice_cols", a, 2)?;
        let (rows, cols) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        if start + len > cols || len == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("slice {start}..{} of {cols} columns", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[r * cols + start..r * cols + start + len]);
        }
        self.push("slice_cols", Op::SliceCols { a, start, len }, vec![rows, len], data)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[a.0].shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        self.push("reshape", Op::Reshape { a }, shape.to_vec(), data)
    }

    // ---- sequence ops ------------------------------------------------------

    /// Depthwise causal 1-D convolution along rows, zero-padded on the left
    /// and restarted at every segment start. `w` is `[cols, width]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, bias: Var, segs: Arc<Vec<usize>>) -> Result<Var> {
        self.req2("causal_conv1d", x, 2)?;
        self.req2("causal_conv1d", w, 2)?;
        self.req2("causal_conv1d", bias, 1)?;
        let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let (wc, width) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
        if wc != cols || self.nodes[bias.0].shape[0] != cols {
            return Err(Error::Shape {
                op: "causal_conv1d",
                detail: format!("weights [{wc},{width}], bias {:?} vs {cols} channels",
                    self.nodes[bias.0].shape),
            });
        }
        validate_segments(&segs, rows)?;
        let data = kernels::causal_conv1d(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[bias.0].data,
            rows,
            cols,
            width,
            &segs,
        );
        self.push("causal_conv1d", Op::CausalConv1d { x, w, bias, segs }, vec![rows, cols], data)
    }

    /// Inclusive first-order linear recurrence `h_t = a_t ⊙ h_{t-1} + b_t`
    /// per column, state reset at every segment start, zero initial state.
    pub fn linear_scan(&mut self, a: Var, b: Var, segs: Arc<Vec<usize>>) -> Result<Var> {
        self.same_shape("linear_scan", a, b)?;
        let shape = self.nodes[a.0].shape.clone();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        validate_segments(&segs, rows)?;
        let data =
            kernels::linear_scan(&self.nodes[a.0].data, &self.nodes[b.0].data, rows, cols, &segs);
        self.push("linear_scan", Op::LinearScan { a, b, segs }, shape, data)
    }

    /// Outer broadcast `out[t,d,n] = ld[t,d] · dn[d,n]`.
    pub fn outer_ld_dn(&mut self, ld: Var, dn: Var) -> Result<Var> {
        self.req2("outer_ld_dn", ld, 2)?;
        self.req2("outer_ld_dn", dn, 2)?;
        let (l, d) = (self.nodes[ld.0].shape[0], self.nodes[ld.0].shape[1]);
        let (d2, n) = (self.nodes[dn.0].shape[0], self.nodes[dn.0].shape[1]);
        if d != d2 {
            return Err(Error::Shape {
                op: "outer_ld_dn",
                detail: format!("channel extents differ: {d} vs {d2}"),
            });
        }
        let mut data = Vec::with_capacity(l * d * n);
        for t in 0..l {
            for dd in 0..d {
                let v = self.nodes[ld.0].data[t * d + dd];
                let row = &self.nodes[dn.0].data[dd * n..(dd + 1) * n];
                for nn in 0..n {
                    data.push(v * row[nn]);
                }
            }
        }
        self.push("outer_ld_dn", Op::OuterLdDn { ld, dn }, vec![l, d, n], data)
    }

    /// Outer broadcast `out[t,d,n] = ld[t,d] · ln[t,n]`.
    pub fn outer_ld_ln(&mut self, ld: Var, ln: Var) -> Result<Var> {
        self.req2("outer_ld_ln", ld, 2)?;
        self.req2("outer_ld_ln", ln, 2)?;
        let (l, d) = (self.nodes[ld.0].shape[0], self.nodes[ld.0].shape[1]);
        let (l2, n) = (self.nodes[ln.0].shape[0], self.nodes[ln.0].shape[1]);
        if l != l2 {
            return Err(Error::Shape {
                op: "outer_ld_ln",
                detail: format!("sequence extents differ: {l} vs {l2}"),
            });
        }
        let mut data = Vec::with_capacity(l * d * n);
        for t in 0..l {
            for dd in 0..d {
                let v = self.nodes[ld.0].data[t * d + dd];
                let row = &self.nodes[ln.0].data[t * n..(t + 1) * n];
                for nn in 0..n {
                    data.push(v * row[nn]);
                }
            }
        }
        self.push("outer_ld_ln", Op::OuterLdLn { ld, ln }, vec![l, d, n], data)
    }

    /// State contraction `out[t,d] = Σ_n h[t,d,n] · c[t,n]`.
    pub fn contract_state(&mut self, h: Var, c: Var) -> Result<Var> {
        self.req2("contract_state", h, 3)?;
        self.req2("contract_state", c, 2)?;
        let (l, d, n) =
            (self.nodes[h.0].shape[0], self.nodes[h.0].shape[1], self.nodes[h.0].shape[2]);
        let (l2, n2) = (self.nodes[c.0].shape[0], self.nodes[c.0].shape[1]);
        if l != l2 || n != n2 {
            return Err(Error::Shape {
                op: "contract_state",
                detail: format!("[{l},{d},{n}] vs [{l2},{n2}]"),
            });
        }
        let mut data = Vec::with_capacity(l * d);
        for t in 0..l {
            let crow = &self.nodes[c.0].data[t * n..(t + 1) * n];
            for dd in 0..d {
                let hrow = &self.nodes[h.0].data[(t * d + dd) * n..(t * d + dd + 1) * n];
                let mut acc = S::zero();
                for nn in 0..n {
                    acc = acc + hrow[nn] * crow[nn];
                }
                data.push(acc);
            }
        }
        self.push("contract_state", Op::ContractState { h, c }, vec![l, d], data)
    }

    // ---- losses / reductions ----------------------------------------------

    /// Mean negative log-softmax over rows whose label is not `ignore`.
    /// Returns 0 (with zero gradient) when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<i64>>, ignore: i64) -> Result<Var> {
        self.req2("cross_entropy", logits, 2)?;
        let (rows, k) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        let mut total = S::zero();
        let mut count = 0usize;
        for (r, &y) in labels.iter().enumerate() {
            if y == ignore {
                continue;
            }
            if y < 0 || y >= k as i64 {
                return Err(Error::Range(format!(
                    "cross_entropy: label {y} at row {r} outside [0,{k})"
                )));
            }
            let row = &self.nodes[logits.0].data[r * k..(r + 1) * k];
            total = total + log_sum_exp(row) - row[y as usize];
            count += 1;
        }
        let value = if count == 0 { S::zero() } else { total / S::c(count as f64) };
        self.push("cross_entropy", Op::CrossEntropy { logits, labels, ignore }, vec![1], vec![value])
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].data.iter().fold(S::zero(), |acc, &v| acc + v);
        self.push("sum_all", Op::SumAll { a }, vec![1], vec![total])
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn validate_segments(segs: &[usize], rows: usize) -> Result<()> {
    if segs.is_empty() || segs[0] != 0 {
        return Err(Error::Domain("segment starts must begin with 0".into()));
    }
    for w in segs.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Domain("segment starts must be strictly increasing".into()));
        }
    }
    if *segs.last().unwrap() >= rows {
        return Err(Error::Domain(format!(
            "segment start {} beyond {rows} rows",
            segs.last().unwrap()
        )));
    }
    Ok(())
}

/// Max-subtracted log-sum-exp of one row.
fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let sum = row.iter().fold(S::zero(), |a, &v| a + (v - m).exp());
    m + sum.ln()
}

pub(crate) fn op_inputs<S: Scalar>(op: &Op<S>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } | Op::ConcatCols { a, b } => {
            vec![*a, *b]
        }
        Op::Scale { a, .. }
        | Op::Softplus { a }
        | Op::Sigmoid { a }
        | Op::Silu { a }
        | Op::Exp { a }
        | Op::Phi { a }
        | Op::SliceCols { a, .. }
        | Op::Reshape { a }
        | Op::SumAll { a } => vec![*a],
        Op::AddBias { a, bias } => vec![*a, *bias],
        Op::ScaleCols { a, s } => vec![*a, *s],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::RowGather { x, .. } | Op::SegmentReduce { x, .. } => vec![*x],
        Op::CausalConv1d { x, w, bias, .. } => vec![*x, *w, *bias],
        Op::LinearScan { a, b, .. } => vec![*a, *b],
        Op::OuterLdDn { ld, dn } => vec![*ld, *dn],
        Op::OuterLdLn { ld, ln } => vec![*ld, *ln],
        Op::ContractState { h, c } => vec![*h, *c],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, compare_gradients, GradCheckReport};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Gradient-check one op: `build` applies it to parameter leaves, the
    /// output is projected to a scalar with a fixed random direction.
    fn gradcheck_op(
        params: Vec<(&str, Tensor<f64>)>,
        build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> crate::Result<Var>,
    ) -> GradCheckReport {
        let mut store = ParamStore::new();
        for (n, p) in params {
            store.insert(n, p).unwrap();
        }
        let f = |st: &ParamStore<f64>| -> crate::Result<(Tape<f64>, Var)> {
            let mut tape = Tape::new();
            let out = build(&mut tape, st)?;
            let shape = tape.shape(out).to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
            let r = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
            let rv = tape.input(&r);
            let prod = tape.mul(out, rv)?;
            tape.sum_all(prod)
                .map(|loss| (tape, loss))
        };
        check_gradients(f, &mut store, 1e-5, 1e-6).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.input(&Tensor::zeros(&[2, 3]));
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(ai), &[1.0, 2.0, 3.0, 4.0]);
        let az = tape.matmul(a, zero).unwrap();
        assert!(tape.data(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]]·[[5,6],[7,8]] worked out by hand.
        let mut tape = Tape::new();
        let a = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::zeros(&[2, 3]));
        let b = tape.input(&Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let g = tape.input(&Tensor::full(&[4], 1.0));
        let b = tape.input(&Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let mut tape = Tape::new();
        let x0 = rand_t(&[3, 5], 1);
        let shifted = Tensor::from_fn(&[3, 5], |i| x0.data()[i] + 7.25);
        let g = Tensor::full(&[5], 1.0);
        let b = Tensor::zeros(&[5]);
        let (xv, sv) = (tape.input(&x0), tape.input(&shifted));
        let (gv, bv) = (tape.input(&g), tape.input(&b));
        let y0 = tape.layer_norm(xv, gv, bv, 1e-8).unwrap();
        let y1 = tape.layer_norm(sv, gv, bv, 1e-8).unwrap();
        for (a, b) in tape.data(y0).iter().zip(tape.data(y1)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // Row [1,3]: mean 2, biased std 1, so the output is [-1, 1].
        let mut tape = Tape::new();
        let x = tape.input(&t(&[1, 2], &[1.0, 3.0]));
        let g = tape.input(&Tensor::full(&[2], 1.0));
        let b = tape.input(&Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        assert!((tape.data(y)[0] + 1.0).abs() < 1e-6);
        assert!((tape.data(y)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let x = rand_t(&[8, 16], 5);
        let xv = tape.input(&x);
        let g = tape.input(&Tensor::full(&[16], 1.0));
        let b = tape.input(&Tensor::zeros(&[16]));
        let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
        for r in 0..8 {
            let row = &tape.data(y)[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "row var {var}");
        }
    }

    #[test]
    fn softplus_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[3], &[0.0, 30.0, -40.0]));
        let y = tape.softplus(x).unwrap();
        assert!((tape.data(y)[0] - 2f64.ln()).abs() < 1e-15);
        // Asymptotic check against the direct form, which is still exact
        // in f64 at x = 30.
        let direct = (1.0 + 30f64.exp()).ln();
        assert!((tape.data(y)[1] - direct).abs() < 1e-9);
        // Large negative input must not underflow to an error.
        assert!(tape.data(y)[2] > 0.0 && tape.data(y)[2] < 1e-15);
    }

    #[test]
    fn gate_zero_cases() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[2], &[4.0, -2.0]));
        let z0 = tape.input(&Tensor::zeros(&[2]));
        let g = tape.gate(x, z0).unwrap();
        // σ(0) = 0.5 so gating by a zero signal halves the operand.
        assert_eq!(tape.data(g), &[2.0, -1.0]);
        let zero = tape.input(&Tensor::zeros(&[2]));
        let z = tape.input(&t(&[2], &[1.0, -3.0]));
        let g2 = tape.gate(zero, z).unwrap();
        assert!(tape.data(g2).iter().all(|&v| v == 0.0));
        let s0 = tape.silu(z0).unwrap();
        assert!(tape.data(s0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(x), Err(crate::Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let k = 7;
        let logits = tape.input(&Tensor::full(&[3, k], 0.42));
        let loss = tape
            .cross_entropy(logits, Arc::new(vec![0, 3, 6]), -1)
            .unwrap();
        assert!((tape.scalar_value(loss) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut store = ParamStore::new();
        store.insert("logits", rand_t(&[4, 3], 9)).unwrap();
        let mut tape = Tape::new();
        let lv = tape.param(&store, "logits").unwrap();
        let loss = tape.cross_entropy(lv, Arc::new(vec![-1; 4]), -1).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        tape.backward(loss).unwrap();
        store.zero_grads();
        tape.accumulate_param_grads(&mut store).unwrap();
        assert!(store.get("logits").unwrap().grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_two_class_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.input(&t(&[1, 2], &[2.0, 0.0]));
        let loss = tape.cross_entropy(logits, Arc::new(vec![0]), -1).unwrap();
        let expected = (1.0 + (-2f64).exp()).ln();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(&Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, Arc::new(vec![0, 3]), -1),
            Err(crate::Error::Range(_))
        ));
    }

    // ---- per-op gradient checks (rel err < 1e-6 at h = 1e-5) ----

    #[test]
    fn grad_add_mul_scale() {
        let r = gradcheck_op(vec![("a", rand_t(&[3, 4], 1)), ("b", rand_t(&[3, 4], 2))], |tp, st| {
            let a = tp.param(st, "a")?;
            let b = tp.param(st, "b")?;
            let s = tp.add(a, b)?;
            let m = tp.mul(s, a)?;
            tp.scale(m, -1.7)
        });
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_bias_and_scale_cols() {
        let r = gradcheck_op(
            vec![("x", rand_t(&[4, 3], 3)), ("b", rand_t(&[3], 4)), ("s", rand_t(&[3], 5))],
            |tp, st| {
                let x = tp.param(st, "x")?;
                let b = tp.param(st, "b")?;
                let s = tp.param(st, "s")?;
                let y = tp.add_bias(x, b)?;
                tp.scale_cols(y, s)
            },
        );
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_matmul() {
        let r = gradcheck_op(vec![("a", rand_t(&[3, 4], 6)), ("b", rand_t(&[4, 2], 7))], |tp, st| {
            let a = tp.param(st, "a")?;
            let b = tp.param(st, "b")?;
            tp.matmul(a, b)
        });
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_activations() {
        for op in ["softplus", "sigmoid", "silu", "exp", "phi"] {
            let r = gradcheck_op(vec![("x", rand_t(&[2, 5], 8))], |tp, st| {
                let x = tp.param(st, "x")?;
                match op {
                    "softplus" => tp.softplus(x),
                    "sigmoid" => tp.sigmoid(x),
                    "silu" => tp.silu(x),
                    "exp" => tp.exp(x),
                    _ => tp.phi(x),
                }
            });
            assert!(r.passed(), "{op}: {}", r.failures());
        }
    }

    #[test]
    fn grad_layer_norm() {
        let r = gradcheck_op(
            vec![("x", rand_t(&[4, 6], 10)), ("g", rand_t(&[6], 11)), ("b", rand_t(&[6], 12))],
            |tp, st| {
                let x = tp.param(st, "x")?;
                let g = tp.param(st, "g")?;
                let b = tp.param(st, "b")?;
                tp.layer_norm(x, g, b, 1e-5)
            },
        );
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_row_gather_with_dups_and_missing() {
        let idx = Arc::new(vec![2i64, 0, 2, -1, 1]);
        let r = gradcheck_op(vec![("x", rand_t(&[3, 4], 13))], move |tp, st| {
            let x = tp.param(st, "x")?;
            tp.row_gather(x, idx.clone())
        });
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_segment_reduce() {
        let seg = Arc::new(vec![0usize, 1, 0, 2, 1, 0]);
        let r = gradcheck_op(vec![("x", rand_t(&[6, 3], 14))], {
            let seg = seg.clone();
            move |tp, st| {
                let x = tp.param(st, "x")?;
                tp.segment_mean(x, seg.clone(), 3)
            }
        });
        assert!(r.passed(), "mean: {}", r.failures());
        let r = gradcheck_op(vec![("x", rand_t(&[6, 3], 15))], move |tp, st| {
            let x = tp.param(st, "x")?;
            tp.segment_max(x, seg.clone(), 3)
        });
        assert!(r.passed(), "max: {}", r.failures());
    }

    #[test]
    fn grad_concat_slice_reshape() {
        let r = gradcheck_op(
            vec![("a", rand_t(&[3, 2], 16)), ("b", rand_t(&[3, 4], 17))],
            |tp, st| {
                let a = tp.param(st, "a")?;
                let b = tp.param(st, "b")?;
                let c = tp.concat_cols(a, b)?;
                let s = tp.slice_cols(c, 1, 4)?;
                tp.reshape(s, &[2, 6])
            },
        );
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_causal_conv1d() {
        let segs = Arc::new(vec![0usize, 5]);
        let r = gradcheck_op(
            vec![("x", rand_t(&[9, 2], 18)), ("w", rand_t(&[2, 4], 19)), ("b", rand_t(&[2], 20))],
            move |tp, st| {
                let x = tp.param(st, "x")?;
                let w = tp.param(st, "w")?;
                let b = tp.param(st, "b")?;
                tp.causal_conv1d(x, w, b, segs.clone())
            },
        );
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_linear_scan() {
        let segs = Arc::new(vec![0usize, 7]);
        let r = gradcheck_op(
            vec![("a", rand_t(&[11, 3], 21)), ("b", rand_t(&[11, 3], 22))],
            move |tp, st| {
                let a = tp.param(st, "a")?;
                let b = tp.param(st, "b")?;
                tp.linear_scan(a, b, segs.clone())
            },
        );
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_outer_and_contract() {
        let r = gradcheck_op(
            vec![("ld", rand_t(&[4, 2], 23)), ("dn", rand_t(&[2, 3], 24)), ("ln", rand_t(&[4, 3], 25))],
            |tp, st| {
                let ld = tp.param(st, "ld")?;
                let dn = tp.param(st, "dn")?;
                let ln = tp.param(st, "ln")?;
                let h1 = tp.outer_ld_dn(ld, dn)?;
                let h2 = tp.outer_ld_ln(ld, ln)?;
                let h = tp.add(h1, h2)?;
                tp.contract_state(h, ln)
            },
        );
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn grad_cross_entropy() {
        let labels = Arc::new(vec![0i64, 2, -1, 1]);
        let mut store = ParamStore::new();
        store.insert("logits", rand_t(&[4, 3], 26)).unwrap();
        let f = move |st: &ParamStore<f64>| {
            let mut tp = Tape::new();
            let l = tp.param(st, "logits")?;
            let loss = tp.cross_entropy(l, labels.clone(), -1)?;
            Ok((tp, loss))
        };
        let r = check_gradients(f, &mut store, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{}", r.failures());
    }

    // ---- gradcheck harness behaviour ----

    #[test]
    fn gradcheck_constant_function() {
        let mut store = ParamStore::new();
        store.insert("theta", rand_t(&[3], 27)).unwrap();
        let f = |_st: &ParamStore<f64>| {
            let mut tp = Tape::new();
            let c = tp.input(&Tensor::scalar(4.5));
            let loss = tp.sum_all(c)?;
            Ok((tp, loss))
        };
        let r = check_gradients(f, &mut store, 1e-5, 1e-6).unwrap();
        assert!(r.passed());
        assert_eq!(r.max_rel_err(), 0.0);
    }

    #[test]
    fn gradcheck_sum_of_squares() {
        let mut store = ParamStore::new();
        store.insert("theta", rand_t(&[5], 28)).unwrap();
        let f = |st: &ParamStore<f64>| {
            let mut tp = Tape::new();
            let th = tp.param(st, "theta")?;
            let sq = tp.mul(th, th)?;
            let loss = tp.sum_all(sq)?;
            Ok((tp, loss))
        };
        let r = check_gradients(f, &mut store, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{}", r.failures());
    }

    #[test]
    fn gradcheck_flags_doubled_backward() {
        // A backward corrupted by a factor of two must surface as a relative
        // error of about one half.
        use indexmap::IndexMap;
        let mut analytic = IndexMap::new();
        analytic.insert("w".to_string(), vec![2.0, -4.0, 0.9]);
        let mut numeric = IndexMap::new();
        numeric.insert("w".to_string(), vec![1.0, -2.0, 0.45]);
        let report = compare_gradients(&analytic, &numeric, 1e-6);
        assert!(!report.passed());
        assert!((report.max_rel_err() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let mut store = ParamStore::new();
        store.insert("theta", rand_t(&[2], 29)).unwrap();
        let f = |st: &ParamStore<f64>| {
            let mut tp = Tape::new();
            let v = tp.param(st, "theta")?;
            let loss = tp.sum_all(v)?;
            Ok((tp, loss))
        };
        assert!(matches!(
            check_gradients(f, &mut store, 1e-2, 1e-6),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn gradcheck_detects_nondeterminism() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.insert("theta", rand_t(&[2], 30)).unwrap();
        let counter = Cell::new(0.0f64);
        let f = move |st: &ParamStore<f64>| {
            counter.set(counter.get() + 1.0);
            let mut tp = Tape::new();
            let v = tp.param(st, "theta")?;
            let drift = tp.input(&Tensor::scalar(counter.get()));
            let s = tp.sum_all(v)?;
            let loss = tp.add(s, drift)?;
            Ok((tp, loss))
        };
        assert!(matches!(
            check_gradients(f, &mut store, 1e-5, 1e-6),
            Err(crate::Error::NonDeterministic(_))
        ));
    }

    #[test]
    fn backward_without_tracked_leaves_is_noop() {
        let mut tape = Tape::new();
        let x = tape.input(&rand_t(&[3, 3], 31));
        let y = tape.exp(x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
