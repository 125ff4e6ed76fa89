//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves are
//! either parameters (gradients requested) or constants. [`Graph::backward`]
//! replays the tape in reverse from a scalar loss and returns gradients for
//! every node that depends on a parameter; constants and anything computed
//! only from constants have no gradient entry at all.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulT(Var, Var),
    AddRowBroadcast(Var, Var),
    AddColBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    /// Softmax weights are cached for the reverse sweep.
    ShiftedLseRows(Var, Var, Vec<f64>),
    ShiftedLseCols(Var, Var, Vec<f64>),
    ConcatCols(Var, Var),
    Transpose(Var),
    SelectRows(Var, Vec<usize>),
    PairwiseDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Confined to one thread while active.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no path
    /// from a parameter runs through `var`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient is requested.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = dims(av);
        let (m, kb) = dims(bv);
        if k != kb {
            return Err(Error::shape(
                "matmul_t",
                format!("lhs has {k} columns"),
                format!("rhs has {kb} columns"),
            ));
        }
        let (x, y) = (av.values(), bv.values());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &x[i * k..(i + 1) * k];
            for j in 0..m {
                let yr = &y[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (p, q) in xr.iter().zip(yr) {
                    acc += p * q;
                }
                out[i * m + j] = acc;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulT(a, b), ng))
    }

    /// Adds a length-`m` vector to every row of `a: [n, m]`.
    pub fn add_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (n, m) = dims(av);
        if vv.len() != m {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{m} columns"),
                format!("vector of {}", vv.len()),
            ));
        }
        let mut out = av.values().to_vec();
        for i in 0..n {
            for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(vv.values()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddRowBroadcast(a, v), ng))
    }

    /// Adds a length-`n` vector to every column of `a: [n, m]`.
    pub fn add_col_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (n, m) = dims(av);
        if vv.len() != n {
            return Err(Error::shape(
                "add_col_broadcast",
                format!("{n} rows"),
                format!("vector of {}", vv.len()),
            ));
        }
        let mut out = av.values().to_vec();
        for i in 0..n {
            let b = vv.values()[i];
            for o in &mut out[i * m..(i + 1) * m] {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddColBroadcast(a, v), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let values = av
            .values()
            .iter()
            .zip(bv.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), values)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let values = av.values().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(av.shape().to_vec(), values).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums: `[n, m] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = dims(av);
        let v = (0..n)
            .map(|i| av.values()[i * m..(i + 1) * m].iter().sum())
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::column(v), Op::SumRows(a), ng)
    }

    /// Per-column sums: `[n, m] -> [1, m]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = dims(av);
        let mut v = vec![0.0; m];
        for i in 0..n {
            for (o, x) in v.iter_mut().zip(&av.values()[i * m..(i + 1) * m]) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::row_vector(v), Op::SumCols(a), ng)
    }

    /// Stable log-sum-exp over each row: `[n, m] -> [n, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = dims(av);
        let v = (0..n)
            .map(|i| lse(&av.values()[i * m..(i + 1) * m]))
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::column(v), Op::LogSumExpRows(a), ng)
    }

    /// Stable log-sum-exp over each column: `[n, m] -> [1, m]`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = dims(av);
        let x = av.values();
        let mut mx = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            for j in 0..m {
                mx[j] = mx[j].max(x[i * m + j]);
            }
        }
        let mut acc = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                acc[j] += (x[i * m + j] - mx[j]).exp();
            }
        }
        let v = mx
            .iter()
            .zip(&acc)
            .map(|(&mx, &s)| {
                if mx == f64::NEG_INFINITY {
                    mx
                } else {
                    mx + s.ln()
                }
            })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::row_vector(v), Op::LogSumExpCols(a), ng)
    }

    /// `out_i = log Σ_j exp(a_ij + v_j)` for `a: [n, m]`, `v: [1, m]`.
    pub fn logsumexp_rows_shifted(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (n, m) = dims(av);
        if vv.shape() != [1, m] {
            return Err(Error::shape(
                "logsumexp_rows_shifted",
                format!("[{n}, {m}]"),
                format!("{:?}", vv.shape()),
            ));
        }
        let (x, s) = (av.values(), vv.values());
        let mut w = vec![0.0; n * m];
        let mut out = vec![f64::NEG_INFINITY; n];
        for i in 0..n {
            let row = &mut w[i * m..(i + 1) * m];
            for j in 0..m {
                row[j] = x[i * m + j] + s[j];
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                total += *e;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|e| *e *= inv);
            out[i] = mx + total.ln();
        }
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(Tensor::column(out), Op::ShiftedLseRows(a, v, w), ng))
    }

    /// `out_j = log Σ_i exp(a_ij + v_i)` for `a: [n, m]`, `v: [n, 1]`.
    pub fn logsumexp_cols_shifted(&mut self, a: Var, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (n, m) = dims(av);
        if vv.shape() != [n, 1] {
            return Err(Error::shape(
                "logsumexp_cols_shifted",
                format!("[{n}, {m}]"),
                format!("{:?}", vv.shape()),
            ));
        }
        let (x, s) = (av.values(), vv.values());
        let mut w = vec![0.0; n * m];
        let mut mx = vec![f64::NEG_INFINITY; m];
        for ((wrow, xrow), &si) in w.chunks_mut(m).zip(x.chunks(m)).zip(s) {
            for ((e, &xv), mj) in wrow.iter_mut().zip(xrow).zip(mx.iter_mut()) {
                *e = xv + si;
                *mj = mj.max(*e);
            }
        }
        let mut total = vec![0.0; m];
        for wrow in w.chunks_mut(m) {
            for ((e, &mj), tj) in wrow.iter_mut().zip(&mx).zip(total.iter_mut()) {
                *e = if mj == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*e - mj).exp()
                };
                *tj += *e;
            }
        }
        let inv: Vec<f64> = total
            .iter()
            .map(|&t| if t > 0.0 { 1.0 / t } else { 0.0 })
            .collect();
        for wrow in w.chunks_mut(m) {
            for (e, &r) in wrow.iter_mut().zip(&inv) {
                *e *= r;
            }
        }
        let out = (0..m)
            .map(|j| {
                if mx[j] == f64::NEG_INFINITY {
                    mx[j]
                } else {
                    mx[j] + total[j].ln()
                }
            })
            .collect();
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(Tensor::row_vector(out), Op::ShiftedLseCols(a, v, w), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).concat_cols(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::ConcatCols(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = dims(av);
        let x = av.values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::matrix(m, n, out).expect("n*m values"),
            Op::Transpose(a),
            ng,
        )
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape(
                "select_rows",
                format!("{} rows", av.rows()),
                format!("index {bad}"),
            ));
        }
        let t = av.select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(t, Op::SelectRows(a, idx.to_vec()), ng))
    }

    /// Euclidean distances between rows: `[n, p] x [m, p] -> [n, m]`.
    /// The derivative at zero distance is taken to be zero.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p) = dims(av);
        let (m, pb) = dims(bv);
        if p != pb {
            return Err(Error::shape(
                "pairwise_dist",
                format!("{p} columns"),
                format!("{pb} columns"),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let x = av.row(i);
            for j in 0..m {
                let d2: f64 = x
                    .iter()
                    .zip(bv.row(j))
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum();
                out[i * m + j] = d2.sqrt();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::PairwiseDist(a, b), ng))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulate `f(k)` into the gradient of `v` for every flat index k.
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.values();

        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(a, b) => {
                let (n, k) = dims(&nodes[a.0].value);
                let m = nodes[b.0].value.rows();
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * y[j * k + p];
                            }
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * x[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::AddRowBroadcast(a, v) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &|ga| add_into(ga, g));
                acc(*v, &|gv| {
                    for (k, x) in g.iter().enumerate() {
                        gv[k % m] += x;
                    }
                });
            }
            Op::AddColBroadcast(a, v) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &|ga| add_into(ga, g));
                acc(*v, &|gv| {
                    for (k, x) in g.iter().enumerate() {
                        gv[k / m] += x;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k];
                    }
                });
                acc(*b, &|gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * x[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += x * s;
                }
            }),
            Op::AddScalar(a) => acc(*a, &|ga| add_into(ga, g)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.values();
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.values();
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k];
                    }
                });
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / x[k];
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &|ga| {
                    for k in 0..g.len() {
                        ga[k] += 2.0 * g[k] * x[k];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::SumRows(a) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &|ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o += g[k / m];
                    }
                });
            }
            Op::SumCols(a) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &|ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o += g[k % m];
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let m = nodes[a.0].value.cols();
                let (x, y) = (val(*a), node.value.values());
                acc(*a, &|ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        let i = k / m;
                        if y[i].is_finite() {
                            *o += g[i] * (x[k] - y[i]).exp();
                        }
                    }
                });
            }
            Op::LogSumExpCols(a) => {
                let m = nodes[a.0].value.cols();
                let (x, y) = (val(*a), node.value.values());
                acc(*a, &|ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        let j = k % m;
                        if y[j].is_finite() {
                            *o += g[j] * (x[k] - y[j]).exp();
                        }
                    }
                });
            }
            Op::ShiftedLseRows(a, v, w) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &|ga| {
                    for ((grow, wrow), &gi) in ga.chunks_mut(m).zip(w.chunks(m)).zip(g) {
                        for (o, &wk) in grow.iter_mut().zip(wrow) {
                            *o += gi * wk;
                        }
                    }
                });
                acc(*v, &|gv| {
                    for (wrow, &gi) in w.chunks(m).zip(g) {
                        for (o, &wk) in gv.iter_mut().zip(wrow) {
                            *o += gi * wk;
                        }
                    }
                });
            }
            Op::ShiftedLseCols(a, v, w) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &|ga| {
                    for (grow, wrow) in ga.chunks_mut(m).zip(w.chunks(m)) {
                        for ((o, &wk), &gj) in grow.iter_mut().zip(wrow).zip(g) {
                            *o += gj * wk;
                        }
                    }
                });
                acc(*v, &|gv| {
                    for (o, wrow) in gv.iter_mut().zip(w.chunks(m)) {
                        *o += wrow.iter().zip(g).map(|(wk, gj)| wk * gj).sum::<f64>();
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                let w = ca + cb;
                acc(*a, &|ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o += g[(k / ca) * w + k % ca];
                    }
                });
                acc(*b, &|gb| {
                    for (k, o) in gb.iter_mut().enumerate() {
                        *o += g[(k / cb) * w + ca + k % cb];
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = dims(&nodes[a.0].value);
                acc(*a, &|ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::SelectRows(a, idx) => {
                let c = nodes[a.0].value.cols();
                acc(*a, &|ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for p in 0..c {
                            ga[i * c + p] += g[r * c + p];
                        }
                    }
                });
            }
            Op::PairwiseDist(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, p) = dims(av);
                let m = bv.rows();
                let d = node.value.values();
                let coef = |i: usize, j: usize| {
                    let dij = d[i * m + j];
                    if dij > 0.0 {
                        g[i * m + j] / dij
                    } else {
                        0.0
                    }
                };
                acc(*a, &|ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let c = coef(i, j);
                            if c == 0.0 {
                                continue;
                            }
                            for q in 0..p {
                                ga[i * p + q] +=
                                    c * (av.values()[i * p + q] - bv.values()[j * p + q]);
                            }
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let c = coef(i, j);
                            if c == 0.0 {
                                continue;
                            }
                            for q in 0..p {
                                gb[j * p + q] -=
                                    c * (av.values()[i * p + q] - bv.values()[j * p + q]);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn lse(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
