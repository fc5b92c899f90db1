use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    DivRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powi(Var, i32),
    Matmul(Var, Var),
    Transpose(Var),
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    GatherRows { input: Var, indices: Vec<usize> },
    Pick { input: Var, indices: Vec<usize> },
    Diag(Var),
    LogDet { input: Var, inverse: Tensor },
    LogSumExpRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order so that gradients can be
/// replayed backwards. One tape per forward pass; tapes share nothing.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.numel() == b.numel() {
        let shape = if a.rank() >= b.rank() { a.shape() } else { b.shape() };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(shape.to_vec(), data).expect("equal sizes")
    } else if a.numel() == 1 {
        let x = a.item();
        b.map(|y| f(x, y))
    } else {
        let y = b.item();
        a.map(|x| f(x, y))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only accumulated for leaves with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(Error::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise quotient. Division by an exact zero yields ±inf (or NaN
    /// for 0/0) as in IEEE arithmetic; no error is raised.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b)?;
        let out = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    fn row_op(
        &mut self,
        name: &'static str,
        m: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.numel() != tm.cols() {
            return Err(Error::Dimension {
                op: name,
                lhs: tm.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let c = tm.cols();
        let vd = tv.data();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, vd[k % c]))
            .collect();
        Tensor::new(tm.shape().to_vec(), data)
    }

    /// Adds the vector `v` (length = cols) to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = self.row_op("add_row", m, v, |x, y| x + y)?;
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(out, Op::AddRow(m, v), rg))
    }

    pub fn sub_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = self.row_op("sub_row", m, v, |x, y| x - y)?;
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(out, Op::SubRow(m, v), rg))
    }

    pub fn div_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let out = self.row_op("div_row", m, v, |x, y| x / y)?;
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(out, Op::DivRow(m, v), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::numeric(format!("log of non-positive value {bad}")));
        }
        let out = t.map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::numeric(format!("sqrt of negative value {bad}")));
        }
        let out = t.map(f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        let out = self.value(a).map(|x| x.powi(n));
        let rg = self.rg(a);
        self.push(out, Op::Powi(a, n), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powi(a, 2)
    }

    pub fn pow4(&mut self, a: Var) -> Var {
        self.powi(a, 4)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let out = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = t.transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<(Tensor, usize)> {
        let t = self.value(a);
        let (outer, len, inner) = t.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (i, slot) in dst.iter_mut().enumerate() {
                    *slot += d[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::new(shape, out)?, len))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (out, _) = self.reduce_axis(a, axis)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sum { input: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (out, len) = self.reduce_axis(a, axis)?;
        let inv = 1.0 / len as f64;
        let out = out.map(|x| x * inv);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean { input: a, axis }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Dimension {
                op: "mean_all",
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![],
            });
        }
        let s = self.sum_all(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = t.select_rows(indices);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = m[i, indices[i]]`.
    pub fn pick(&mut self, m: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 || indices.len() != t.rows() || indices.iter().any(|&j| j >= t.cols()) {
            return Err(Error::Dimension {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let out = Tensor::vector(indices.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect());
        let rg = self.rg(m);
        Ok(self.push(
            out,
            Op::Pick {
                input: m,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(Error::Dimension {
                op: "diag",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let n = t.shape()[0];
        let out = Tensor::vector((0..n).map(|i| t.at(i, i)).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Diag(a), rg))
    }

    /// `log |A|` of the symmetric part of a square matrix, via Cholesky.
    /// Fails with a numeric error when the matrix is not positive definite.
    pub fn logdet(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(Error::Dimension {
                op: "logdet",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let n = t.shape()[0];
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (t.at(i, j) + t.at(j, i));
            }
        }
        let chol = cholesky(&sym, n).ok_or_else(|| {
            Error::numeric(
                "covariance is not positive definite; increase the shrinkage delta".to_string(),
            )
        })?;
        let logdet = 2.0 * (0..n).map(|i| chol[i * n + i].ln()).sum::<f64>();
        let inverse = Tensor::matrix(n, n, cholesky_inverse(&chol, n))?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(logdet), Op::LogDet { input: a, inverse }, rg))
    }

    /// Row-wise `log Σ_j exp(m_ij)`, stabilised by subtracting the row max.
    pub fn logsumexp_rows(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 || t.cols() == 0 {
            return Err(Error::Dimension {
                op: "logsumexp_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out: Vec<f64> = (0..t.rows())
            .map(|i| {
                let row = t.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                max + s.ln()
            })
            .collect();
        let rg = self.rg(m);
        Ok(self.push(Tensor::vector(out), Op::LogSumExpRows(m), rg))
    }

    /// Backpropagates from a single-element output with seed 1.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let v = self.value(out);
        if v.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward (non-scalar output)",
                lhs: v.shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.backward_with_seed(out, Tensor::full(v.shape(), 1.0))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` (same shape as
    /// `out`). Nodes are replayed in reverse recording order.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Dimension {
                op: "backward seed",
                lhs: self.value(out).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(grads, *a, g, |gv, _| gv);
                self.accum_broadcast(grads, *b, g, |gv, _| gv);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, g, |gv, _| gv);
                self.accum_broadcast(grads, *b, g, |gv, _| -gv);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accum_broadcast(grads, *a, g, |gv, k| gv * bcast(tb, k));
                self.accum_broadcast(grads, *b, g, |gv, k| gv * bcast(ta, k));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accum_broadcast(grads, *a, g, |gv, k| gv / bcast(tb, k));
                self.accum_broadcast(grads, *b, g, |gv, k| {
                    let y = bcast(tb, k);
                    -gv * bcast(ta, k) / (y * y)
                });
            }
            Op::AddRow(m, v) | Op::SubRow(m, v) => {
                let sign = if matches!(node.op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                if self.rg(*m) {
                    self.accum(grads, *m, g.clone());
                }
                if self.rg(*v) {
                    let c = g.cols();
                    let mut gv = vec![0.0; c];
                    for (k, &x) in g.data().iter().enumerate() {
                        gv[k % c] += sign * x;
                    }
                    let shape = val(*v).shape().to_vec();
                    self.accum(grads, *v, Tensor::new(shape, gv).expect("row grad"));
                }
            }
            Op::DivRow(m, v) => {
                let (tm, tv) = (val(*m), val(*v));
                let c = tm.cols();
                if self.rg(*m) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| x / tv.data()[k % c])
                        .collect();
                    self.accum(grads, *m, Tensor::new(tm.shape().to_vec(), data).expect("div_row"));
                }
                if self.rg(*v) {
                    let mut gv = vec![0.0; c];
                    for (k, (&x, &mv)) in g.data().iter().zip(tm.data()).enumerate() {
                        let y = tv.data()[k % c];
                        gv[k % c] -= x * mv / (y * y);
                    }
                    self.accum(grads, *v, Tensor::new(tv.shape().to_vec(), gv).expect("div_row"));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum_unary(grads, *a, g, |gv, _, _| gv * c, &node.value);
            }
            Op::Offset(a) => self.accum_unary(grads, *a, g, |gv, _, _| gv, &node.value),
            Op::Relu(a) => self.accum_unary(
                grads,
                *a,
                g,
                |gv, x, _| if x > 0.0 { gv } else { 0.0 },
                &node.value,
            ),
            Op::Exp(a) => self.accum_unary(grads, *a, g, |gv, _, y| gv * y, &node.value),
            Op::Log(a) => self.accum_unary(grads, *a, g, |gv, x, _| gv / x, &node.value),
            Op::Sqrt(a) => self.accum_unary(grads, *a, g, |gv, _, y| gv / (2.0 * y), &node.value),
            Op::Powi(a, n) => {
                let n = *n;
                self.accum_unary(
                    grads,
                    *a,
                    g,
                    |gv, x, _| gv * f64::from(n) * x.powi(n - 1),
                    &node.value,
                )
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let buf = self.grad_buf(grads, *a);
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        tb.data(),
                        (1, n as isize),
                        buf,
                        true,
                    );
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let buf = self.grad_buf(grads, *b);
                    gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        buf,
                        true,
                    );
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    self.accum(grads, *a, g.transpose());
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                if !self.rg(*input) {
                    return;
                }
                let t = val(*input);
                let (outer, len, inner) = t.axis_split(*axis).expect("validated in forward");
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut data = vec![0.0; t.numel()];
                for o in 0..outer {
                    for kk in 0..len {
                        for i in 0..inner {
                            data[(o * len + kk) * inner + i] = g.data()[o * inner + i] * factor;
                        }
                    }
                }
                self.accum(grads, *input, Tensor::new(t.shape().to_vec(), data).expect("sum"));
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    self.accum(grads, *a, Tensor::full(val(*a).shape(), g.item()));
                }
            }
            Op::GatherRows { input, indices } => {
                if !self.rg(*input) {
                    return;
                }
                let c = val(*input).cols();
                let buf = self.grad_buf(grads, *input);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        buf[i * c + j] += g.data()[r * c + j];
                    }
                }
            }
            Op::Pick { input, indices } => {
                if !self.rg(*input) {
                    return;
                }
                let c = val(*input).cols();
                let buf = self.grad_buf(grads, *input);
                for (i, &j) in indices.iter().enumerate() {
                    buf[i * c + j] += g.data()[i];
                }
            }
            Op::Diag(a) => {
                if !self.rg(*a) {
                    return;
                }
                let n = val(*a).shape()[0];
                let buf = self.grad_buf(grads, *a);
                for i in 0..n {
                    buf[i * n + i] += g.data()[i];
                }
            }
            Op::LogDet { input, inverse } => {
                if self.rg(*input) {
                    let s = g.item();
                    self.accum(grads, *input, inverse.map(|x| x * s));
                }
            }
            Op::LogSumExpRows(m) => {
                if !self.rg(*m) {
                    return;
                }
                let t = val(*m);
                let c = t.cols();
                let lse = node.value.data();
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| g.data()[k / c] * (x - lse[k / c]).exp())
                    .collect();
                self.accum(grads, *m, Tensor::new(t.shape().to_vec(), data).expect("lse"));
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        let shape = self.nodes[v.0].value.shape();
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates `f(g_k, k)` into operand `v`, summing when `v` was a
    /// broadcast scalar.
    fn accum_broadcast(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        g: &Tensor,
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.rg(v) {
            return;
        }
        let target = &self.nodes[v.0].value;
        if target.numel() == g.numel() {
            let data = g.data().iter().enumerate().map(|(k, &x)| f(x, k)).collect();
            self.accum(grads, v, Tensor::new(target.shape().to_vec(), data).expect("shape"));
        } else {
            let s: f64 = g.data().iter().enumerate().map(|(k, &x)| f(x, k)).sum();
            self.accum(grads, v, Tensor::full(target.shape(), s));
        }
    }

    /// Accumulates `f(g, x, y)` elementwise, where `x` is the input value and
    /// `y` the output value.
    fn accum_unary(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
        out: &Tensor,
    ) {
        if !self.rg(v) {
            return;
        }
        let x = &self.nodes[v.0].value;
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
            .collect();
        self.accum(grads, v, Tensor::new(x.shape().to_vec(), data).expect("shape"));
    }
}

fn bcast(t: &Tensor, k: usize) -> f64 {
    if t.numel() == 1 {
        t.item()
    } else {
        t.data()[k]
    }
}

/// Lower Cholesky factor of an `n×n` row-major SPD matrix.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// `(L Lᵀ)⁻¹` from a lower Cholesky factor.
pub(crate) fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // Invert L by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for i in 0..n {
        linv[i * n + i] = 1.0 / l[i * n + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}
