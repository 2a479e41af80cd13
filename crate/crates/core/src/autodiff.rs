//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! The primitive set is exactly what the operator network needs: dense and
//! constant matrix products, element-wise arithmetic, GELU/sigmoid/sqrt,
//! row broadcasting, gated sparse aggregation, per-mode kernel mixing, and
//! a spike primitive whose backward uses a surrogate derivative.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] consumes it and
//! returns the gradients of every leaf created with `requires_grad`. Spike
//! time steps unroll onto the same tape, so backward is full BPTT.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{gemm, CsrMatrix, Mat, View};
use crate::spiking::Surrogate;

/// Shaped row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        let (r, c) = self.dims2()?;
        Mat::from_vec(r, c, self.values.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns of a matrix; a 1-D tensor is one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::ShapeMismatch(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn view(&self) -> Result<View<'_>> {
        let (r, c) = self.dims2()?;
        Ok(View::new(&self.values, r, c))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    ConstMatMul {
        mat: Arc<Mat>,
        transpose: bool,
        x: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ConcatCols(usize, usize),
    Gelu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    MeanOver(Vec<usize>),
    BroadcastRow(usize),
    SumAll(usize),
    SumRows(usize),
    SparseGatedAgg {
        adj: Arc<CsrMatrix>,
        gate: usize,
        x: usize,
    },
    Mode1Kernel {
        kernel: usize,
        coeffs: usize,
    },
    Spike {
        membrane: usize,
        theta: usize,
        surrogate: Surrogate,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Ordered record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::DisconnectedLoss);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        if value.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(what.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        })
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let va = self.nodes[ia].value.view()?;
        let vb = self.nodes[ib].value.view()?;
        let mut out = vec![0.0; va.rows() * vb.cols()];
        gemm(1.0, va, vb, 0.0, &mut out)?;
        let shape = vec![va.rows(), vb.cols()];
        let ng = self.ng(ia) || self.ng(ib);
        self.push(Tensor { shape, values: out }, Op::MatMul(ia, ib), ng, "matmul")
    }

    /// `mat * x` (or `mat^T * x`) for a constant matrix.
    pub fn const_matmul(&mut self, mat: &Arc<Mat>, transpose: bool, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let vm = if transpose { mat.view().t() } else { mat.view() };
        let vx = self.nodes[ix].value.view()?;
        let mut out = vec![0.0; vm.rows() * vx.cols()];
        gemm(1.0, vm, vx, 0.0, &mut out)?;
        let shape = vec![vm.rows(), vx.cols()];
        let op = Op::ConstMatMul {
            mat: Arc::clone(mat),
            transpose,
            x: ix,
        };
        let ng = self.ng(ix);
        self.push(Tensor { shape, values: out }, op, ng, "const_matmul")
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[ia].value.shape, &self.nodes[ib].value.shape);
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &'static str, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, what)?;
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let values = va.values.iter().zip(&vb.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape.clone();
        let ng = self.ng(ia) || self.ng(ib);
        self.push(Tensor { shape, values }, op(ia, ib), ng, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "elementwise_mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let values = va.values.iter().map(|x| x * c).collect();
        let shape = va.shape.clone();
        let ng = self.ng(ia);
        self.push(Tensor { shape, values }, Op::Scale(ia, c), ng, "scale")
    }

    pub fn concat_columns(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ra, ca) = self.nodes[ia].value.dims2()?;
        let (rb, cb) = self.nodes[ib].value.dims2()?;
        if ra != rb {
            return Err(Error::ShapeMismatch(format!("concat_columns: {ra} vs {rb} rows")));
        }
        let mut values = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            values.extend_from_slice(&self.nodes[ia].value.values[r * ca..(r + 1) * ca]);
            values.extend_from_slice(&self.nodes[ib].value.values[r * cb..(r + 1) * cb]);
        }
        let ng = self.ng(ia) || self.ng(ib);
        let t = Tensor {
            shape: vec![ra, ca + cb],
            values,
        };
        self.push(t, Op::ConcatCols(ia, ib), ng, "concat_columns")
    }

    fn map(&mut self, a: Var, what: &'static str, f: fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let values = va.values.iter().map(|&x| f(x)).collect();
        let shape = va.shape.clone();
        let ng = self.ng(ia);
        self.push(Tensor { shape, values }, op(ia), ng, what)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "gelu", gelu_scalar, Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sigmoid", sigmoid_scalar, Op::Sigmoid)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, "sqrt", f64::sqrt, Op::Sqrt)
    }

    /// Element-wise mean of equally shaped tensors.
    pub fn mean_over(&mut self, items: &[Var]) -> Result<Var> {
        let ids = items.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(Error::ShapeMismatch("mean_over of an empty list".into()));
        };
        for &i in &ids[1..] {
            self.same_shape(first, i, "mean_over")?;
        }
        let inv = 1.0 / ids.len() as f64;
        let mut values = vec![0.0; self.nodes[first].value.len()];
        for &i in &ids {
            values.iter_mut().zip(&self.nodes[i].value.values).for_each(|(a, b)| *a += b);
        }
        values.iter_mut().for_each(|v| *v *= inv);
        let shape = self.nodes[first].value.shape.clone();
        let ng = ids.iter().any(|&i| self.ng(i));
        self.push(Tensor { shape, values }, Op::MeanOver(ids), ng, "mean_over")
    }

    /// Repeats a `[d]` or `[1, d]` row `n` times.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Result<Var> {
        let ir = self.idx(row)?;
        let (r, d) = self.nodes[ir].value.dims2()?;
        if r != 1 {
            return Err(Error::ShapeMismatch(format!("broadcast_row of a {r}-row tensor")));
        }
        let src = &self.nodes[ir].value.values;
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            values.extend_from_slice(src);
        }
        let ng = self.ng(ir);
        let t = Tensor {
            shape: vec![n, d],
            values,
        };
        self.push(t, Op::BroadcastRow(ir), ng, "broadcast_row")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.values.iter().sum();
        let ng = self.ng(ia);
        self.push(Tensor::scalar(s), Op::SumAll(ia), ng, "sum_all")
    }

    /// Column sums of a matrix, as a `[1, d]` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.nodes[ia].value.dims2()?;
        let mut values = vec![0.0; c];
        for row in self.nodes[ia].value.values.chunks_exact(c.max(1)).take(r) {
            values.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let ng = self.ng(ia);
        let t = Tensor {
            shape: vec![1, c],
            values,
        };
        self.push(t, Op::SumRows(ia), ng, "sum_rows")
    }

    /// `out[u] = sum_e gate[e] * A[e] * x[col(e)]` over the stored edges `e`
    /// of row `u`.
    pub fn sparse_gated_agg(&mut self, adj: &Arc<CsrMatrix>, gate: Var, x: Var) -> Result<Var> {
        let (ig, ix) = (self.idx(gate)?, self.idx(x)?);
        if self.nodes[ig].value.len() != adj.nnz() {
            return Err(Error::GateMisaligned {
                gate: self.nodes[ig].value.len(),
                edges: adj.nnz(),
            });
        }
        let (n, d) = self.nodes[ix].value.dims2()?;
        if n != adj.n_cols() {
            return Err(Error::ShapeMismatch(format!(
                "sparse_gated_agg: {n} rows for {} nodes",
                adj.n_cols()
            )));
        }
        let g = &self.nodes[ig].value.values;
        let xv = &self.nodes[ix].value.values;
        let mut values = vec![0.0; adj.n_rows() * d];
        for u in 0..adj.n_rows() {
            let start = adj.indptr()[u];
            let (cols, w) = adj.row(u);
            let out = &mut values[u * d..(u + 1) * d];
            for (e, (&v, &a)) in cols.iter().zip(w).enumerate() {
                let coef = g[start + e] * a;
                out.iter_mut().zip(&xv[v * d..(v + 1) * d]).for_each(|(o, xi)| *o += coef * xi);
            }
        }
        let ng = self.ng(ig) || self.ng(ix);
        let t = Tensor {
            shape: vec![adj.n_rows(), d],
            values,
        };
        let op = Op::SparseGatedAgg {
            adj: Arc::clone(adj),
            gate: ig,
            x: ix,
        };
        self.push(t, op, ng, "sparse_gated_agg")
    }

    /// Per-mode channel mixing: `out[j] = K[j] * c[j]` with `K` of shape
    /// `[m, d_out, d_in]` and `c` of shape `[m, d_in]`.
    pub fn mode1_kernel(&mut self, kernel: Var, coeffs: Var) -> Result<Var> {
        let (ik, ic) = (self.idx(kernel)?, self.idx(coeffs)?);
        let kshape = self.nodes[ik].value.shape.clone();
        let (m, din) = self.nodes[ic].value.dims2()?;
        let [km, dout, kin] = kshape.as_slice() else {
            return Err(Error::ShapeMismatch(format!("kernel shape {kshape:?} is not 3-D")));
        };
        if *km != m || *kin != din {
            return Err(Error::ShapeMismatch(format!(
                "mode1_kernel: kernel {kshape:?} with coefficients [{m}, {din}]"
            )));
        }
        let dout = *dout;
        let kv = &self.nodes[ik].value.values;
        let cv = &self.nodes[ic].value.values;
        let mut values = vec![0.0; m * dout];
        for j in 0..m {
            let block = &kv[j * dout * din..(j + 1) * dout * din];
            let c = &cv[j * din..(j + 1) * din];
            for a in 0..dout {
                values[j * dout + a] = crate::linalg::dot(&block[a * din..(a + 1) * din], c);
            }
        }
        let ng = self.ng(ik) || self.ng(ic);
        let t = Tensor {
            shape: vec![m, dout],
            values,
        };
        let op = Op::Mode1Kernel {
            kernel: ik,
            coeffs: ic,
        };
        self.push(t, op, ng, "mode1_kernel")
    }

    /// Heaviside `membrane >= theta` (theta broadcast over rows). The
    /// backward pass substitutes the surrogate derivative.
    pub fn spike(&mut self, membrane: Var, theta: Var, surrogate: Surrogate) -> Result<Var> {
        let (im, it) = (self.idx(membrane)?, self.idx(theta)?);
        let (n, d) = self.nodes[im].value.dims2()?;
        let (tr, td) = self.nodes[it].value.dims2()?;
        if tr != 1 || td != d {
            return Err(Error::ShapeMismatch(format!(
                "spike: threshold of shape [{tr}, {td}] for {d} features"
            )));
        }
        let mv = &self.nodes[im].value.values;
        let th = &self.nodes[it].value.values;
        let mut values = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                values.push(if mv[r * d + c] >= th[c] { 1.0 } else { 0.0 });
            }
        }
        let ng = self.ng(im) || self.ng(it);
        let t = Tensor {
            shape: vec![n, d],
            values,
        };
        let op = Op::Spike {
            membrane: im,
            theta: it,
            surrogate,
        };
        self.push(t, op, ng, "spike")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[il].value.shape.clone()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let len_of = |j: usize| nodes[j].value.len();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let va = nodes[*a].value.view()?;
                    let vb = nodes[*b].value.view()?;
                    let gv = View::new(&g, va.rows(), vb.cols());
                    if nodes[*a].needs_grad {
                        gemm(1.0, gv, vb.t(), 1.0, slot(&mut grads, *a, len_of(*a)))?;
                    }
                    if nodes[*b].needs_grad {
                        gemm(1.0, va.t(), gv, 1.0, slot(&mut grads, *b, len_of(*b)))?;
                    }
                }
                Op::ConstMatMul { mat, transpose, x } => {
                    if nodes[*x].needs_grad {
                        let vm = if *transpose { mat.view().t() } else { mat.view() };
                        let (_, c) = node.value.dims2()?;
                        let gv = View::new(&g, vm.rows(), c);
                        gemm(1.0, vm.t(), gv, 1.0, slot(&mut grads, *x, len_of(*x)))?;
                    }
                }
                Op::Add(a, b) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut grads[*a], &g);
                    }
                    if nodes[*b].needs_grad {
                        add_into(&mut grads[*b], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut grads[*a], &g);
                    }
                    if nodes[*b].needs_grad {
                        let s = slot(&mut grads, *b, len_of(*b));
                        s.iter_mut().zip(&g).for_each(|(d, gi)| *d -= gi);
                    }
                }
                Op::Mul(a, b) => {
                    for (x, y) in [(*a, *b), (*b, *a)] {
                        if nodes[x].needs_grad {
                            let other = &nodes[y].value.values;
                            let s = slot(&mut grads, x, other.len());
                            for ((d, gi), o) in s.iter_mut().zip(&g).zip(other) {
                                *d += gi * o;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if nodes[*a].needs_grad {
                        let s = slot(&mut grads, *a, g.len());
                        s.iter_mut().zip(&g).for_each(|(d, gi)| *d += c * gi);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (r, c) = node.value.dims2()?;
                    let (_, ca) = nodes[*a].value.dims2()?;
                    let cb = c - ca;
                    if nodes[*a].needs_grad {
                        let s = slot(&mut grads, *a, r * ca);
                        for row in 0..r {
                            for k in 0..ca {
                                s[row * ca + k] += g[row * c + k];
                            }
                        }
                    }
                    if nodes[*b].needs_grad {
                        let s = slot(&mut grads, *b, r * cb);
                        for row in 0..r {
                            for k in 0..cb {
                                s[row * cb + k] += g[row * c + ca + k];
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = &nodes[*a].value.values;
                    let s = slot(&mut grads, *a, x.len());
                    for ((d, gi), &xi) in s.iter_mut().zip(&g).zip(x) {
                        *d += gi * gelu_grad_scalar(xi);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.values;
                    let s = slot(&mut grads, *a, y.len());
                    for ((d, gi), &yi) in s.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
                Op::Sqrt(a) => {
                    let y = &node.value.values;
                    let s = slot(&mut grads, *a, y.len());
                    for ((d, gi), &yi) in s.iter_mut().zip(&g).zip(y) {
                        // subgradient 0 at the kink
                        if yi > 0.0 {
                            *d += gi * 0.5 / yi;
                        }
                    }
                }
                Op::MeanOver(ids) => {
                    let inv = 1.0 / ids.len() as f64;
                    for &j in ids {
                        if nodes[j].needs_grad {
                            let s = slot(&mut grads, j, g.len());
                            s.iter_mut().zip(&g).for_each(|(d, gi)| *d += inv * gi);
                        }
                    }
                }
                Op::BroadcastRow(a) => {
                    let d = nodes[*a].value.len();
                    let s = slot(&mut grads, *a, d);
                    for row in g.chunks_exact(d.max(1)) {
                        s.iter_mut().zip(row).for_each(|(acc, gi)| *acc += gi);
                    }
                }
                Op::SumAll(a) => {
                    let s = slot(&mut grads, *a, len_of(*a));
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::SumRows(a) => {
                    let c = g.len();
                    let s = slot(&mut grads, *a, len_of(*a));
                    for row in s.chunks_exact_mut(c.max(1)) {
                        row.iter_mut().zip(&g).for_each(|(acc, gi)| *acc += gi);
                    }
                }
                Op::SparseGatedAgg { adj, gate, x } => {
                    let (_, d) = node.value.dims2()?;
                    let xv = &nodes[*x].value.values;
                    let gv = &nodes[*gate].value.values;
                    if nodes[*gate].needs_grad {
                        let s = slot(&mut grads, *gate, adj.nnz());
                        for u in 0..adj.n_rows() {
                            let start = adj.indptr()[u];
                            let (cols, w) = adj.row(u);
                            let gu = &g[u * d..(u + 1) * d];
                            for (e, (&v, &a)) in cols.iter().zip(w).enumerate() {
                                s[start + e] += a * crate::linalg::dot(gu, &xv[v * d..(v + 1) * d]);
                            }
                        }
                    }
                    if nodes[*x].needs_grad {
                        let s = slot(&mut grads, *x, xv.len());
                        for u in 0..adj.n_rows() {
                            let start = adj.indptr()[u];
                            let (cols, w) = adj.row(u);
                            let gu = &g[u * d..(u + 1) * d];
                            for (e, (&v, &a)) in cols.iter().zip(w).enumerate() {
                                let coef = gv[start + e] * a;
                                s[v * d..(v + 1) * d]
                                    .iter_mut()
                                    .zip(gu)
                                    .for_each(|(acc, gi)| *acc += coef * gi);
                            }
                        }
                    }
                }
                Op::Mode1Kernel { kernel, coeffs } => {
                    let kshape = &nodes[*kernel].value.shape;
                    let (m, dout, din) = (kshape[0], kshape[1], kshape[2]);
                    let kv = &nodes[*kernel].value.values;
                    let cv = &nodes[*coeffs].value.values;
                    if nodes[*kernel].needs_grad {
                        let s = slot(&mut grads, *kernel, kv.len());
                        for j in 0..m {
                            for a in 0..dout {
                                let ga = g[j * dout + a];
                                let row = &mut s[(j * dout + a) * din..(j * dout + a + 1) * din];
                                row.iter_mut()
                                    .zip(&cv[j * din..(j + 1) * din])
                                    .for_each(|(acc, c)| *acc += ga * c);
                            }
                        }
                    }
                    if nodes[*coeffs].needs_grad {
                        let s = slot(&mut grads, *coeffs, cv.len());
                        for j in 0..m {
                            for a in 0..dout {
                                let ga = g[j * dout + a];
                                let krow = &kv[(j * dout + a) * din..(j * dout + a + 1) * din];
                                s[j * din..(j + 1) * din]
                                    .iter_mut()
                                    .zip(krow)
                                    .for_each(|(acc, k)| *acc += ga * k);
                            }
                        }
                    }
                }
                Op::Spike {
                    membrane,
                    theta,
                    surrogate,
                } => {
                    let (n, d) = node.value.dims2()?;
                    let mv = &nodes[*membrane].value.values;
                    let th = &nodes[*theta].value.values;
                    let sg: Vec<f64> = (0..n * d)
                        .map(|e| g[e] * surrogate.grad(mv[e] - th[e % d]))
                        .collect();
                    if nodes[*membrane].needs_grad {
                        let s = slot(&mut grads, *membrane, n * d);
                        s.iter_mut().zip(&sg).for_each(|(acc, v)| *acc += v);
                    }
                    if nodes[*theta].needs_grad {
                        let s = slot(&mut grads, *theta, d);
                        for (e, v) in sg.iter().enumerate() {
                            s[e % d] -= v;
                        }
                    }
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| match node.op {
                Op::Leaf if node.needs_grad => Some(g.unwrap_or_else(|| vec![0.0; node.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients of the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns the worst `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(xv).expect("x is a parameter").to_vec();
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t)?;
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).values()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.values[i] += eps;
        let mut minus = x.clone();
        minus.values[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
