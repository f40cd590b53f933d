use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{affine_into, axpy, dot, gemm, Tensor};
use super::AutodiffError;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Minimum(usize, usize),
    ConcatCols(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    SumCols(usize),
    SoftmaxRows(usize),
    StraightThroughTop1(usize),
    Mix { gate: usize, y: usize },
    GatedTable { gate: usize, table: usize },
    GaussianLogProb { x: usize, mean: usize, log_std: usize },
    ExclusiveMaxGap(usize),
    NormalCdf(usize),
    HalfCvSquared { x: usize, eps: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so a single reverse sweep over the
/// node list visits every consumer before its inputs. Gradients of leaf nodes
/// created with [`Graph::param`] accumulate across [`Graph::backward`] calls
/// until [`Graph::zero_grad`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl Graph {
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
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Tracked leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        value.check_finite("param")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        value.check_finite("constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.needs(a.0);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.rows() != sb.rows() || sa.cols() != sb.cols() {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa.shape(), sb.shape())));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let vals: Vec<f64> = src.values().iter().map(|&x| f(x)).collect();
        let t = Tensor::matrix(src.rows(), src.cols(), vals).expect("same extent");
        self.unary(a, t, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let vals: Vec<f64> = va.values().iter().zip(vb.values()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::matrix(va.rows(), va.cols(), vals).expect("same extent");
        let rg = self.needs(a.0) || self.needs(b.0);
        self.push(t, op, rg)
    }

    /// `x · wᵀ (+ b)`; `x: [batch × n_in]`, `w: [n_out × n_in]`, `b: [n_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (batch, n_in, n_out) = (xv.rows(), xv.cols(), wv.rows());
        if wv.cols() != n_in {
            return Err(shape_err("affine", format!("x {:?} w {:?}", xv.shape(), wv.shape())));
        }
        if let Some(b) = b {
            if self.value(b).len() != n_out {
                return Err(shape_err("affine", format!("bias {:?}, n_out {}", self.value(b).shape(), n_out)));
            }
        }
        let mut out = vec![0.0; batch * n_out];
        affine_into(
            xv.values(),
            n_in,
            wv.values(),
            n_out,
            b.map(|b| self.nodes[b.0].value.values()),
            &mut out,
        );
        let y = Tensor::matrix(batch, n_out, out)?;
        y.check_finite("affine")?;
        let rg = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        Ok(self.push(y, Op::Affine { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// Element-wise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip(a, b, Op::Minimum(a.0, b.0), |x, y| if y < x { y } else { x }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a.0, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a.0), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        super::math::tanh_in_place(t.values_mut());
        self.unary(a, t, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a.0), libm::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if self.value(a).values().iter().any(|&x| x <= 0.0) {
            return Err(AutodiffError::NonFinite { op: "ln" });
        }
        Ok(self.map(a, Op::Ln(a.0), libm::log))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a.0), |x| x * x)
    }

    /// Standard normal CDF, element-wise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.map(a, Op::NormalCdf(a.0), normal_cdf)
    }

    /// `[B × n1] ++ [B × n2] -> [B × (n1 + n2)]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let t = Tensor::matrix(rows, ca + cb, out)?;
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::ConcatCols(a.0, b.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).values().iter().sum();
        self.unary(a, Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.values().iter().sum::<f64>() / v.len().max(1) as f64;
        self.unary(a, Tensor::scalar(s), Op::MeanAll(a.0))
    }

    /// Sums each row: `[B × n] -> [B × 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let vals: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let t = Tensor::matrix(v.rows(), 1, vals).expect("extent");
        self.unary(a, t, Op::SumRows(a.0))
    }

    /// Sums each column: `[B × n] -> [1 × n]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut acc = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (s, x) in acc.iter_mut().zip(v.row(r)) {
                *s += x;
            }
        }
        let t = Tensor::matrix(1, v.cols(), acc).expect("extent");
        self.unary(a, t, Op::SumCols(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut vals = vec![0.0; v.len()];
        for r in 0..v.rows() {
            softmax_into(v.row(r), &mut vals[r * v.cols()..(r + 1) * v.cols()]);
        }
        let t = Tensor::matrix(v.rows(), v.cols(), vals).expect("extent");
        self.unary(a, t, Op::SoftmaxRows(a.0))
    }

    /// One-hot of the row-wise argmax (lowest index on ties) in the forward
    /// pass; the backward pass hands the incoming gradient to the input
    /// unchanged, so every preference component receives signal.
    pub fn straight_through_top1(&mut self, p: Var) -> Var {
        let v = self.value(p);
        let mut vals = vec![0.0; v.len()];
        for r in 0..v.rows() {
            let j = argmax(v.row(r));
            vals[r * v.cols() + j] = 1.0;
        }
        let t = Tensor::matrix(v.rows(), v.cols(), vals).expect("extent");
        self.unary(p, t, Op::StraightThroughTop1(p.0))
    }

    /// Gated combination of per-expert row blocks.
    ///
    /// `gate: [B × M]`, `y: [B × (M·w)]` → `out[b] = Σ_m gate[b,m] · y[b, m·w..(m+1)·w]`.
    pub fn mix(&mut self, gate: Var, y: Var) -> Result<Var, AutodiffError> {
        let (gv, yv) = (self.value(gate), self.value(y));
        let (rows, m) = (gv.rows(), gv.cols());
        if yv.rows() != rows || m == 0 || yv.cols() % m != 0 {
            return Err(shape_err("mix", format!("gate {:?} y {:?}", gv.shape(), yv.shape())));
        }
        let w = yv.cols() / m;
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let o = &mut out[r * w..(r + 1) * w];
            let yr = yv.row(r);
            for (k, &g) in gv.row(r).iter().enumerate() {
                if g != 0.0 {
                    axpy(o, g, &yr[k * w..(k + 1) * w]);
                }
            }
        }
        let t = Tensor::matrix(rows, w, out)?;
        let rg = self.needs(gate.0) || self.needs(y.0);
        Ok(self.push(t, Op::Mix { gate: gate.0, y: y.0 }, rg))
    }

    /// `gate: [B × M]`, `table: [M × w]` → `out[b] = Σ_m gate[b,m] · table[m]`.
    pub fn gated_table(&mut self, gate: Var, table: Var) -> Result<Var, AutodiffError> {
        let (gv, tv) = (self.value(gate), self.value(table));
        if tv.rows() != gv.cols() {
            return Err(shape_err("gated_table", format!("gate {:?} table {:?}", gv.shape(), tv.shape())));
        }
        let (rows, w) = (gv.rows(), tv.cols());
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            let o = &mut out[r * w..(r + 1) * w];
            for (k, &g) in gv.row(r).iter().enumerate() {
                if g != 0.0 {
                    axpy(o, g, tv.row(k));
                }
            }
        }
        let t = Tensor::matrix(rows, w, out)?;
        let rg = self.needs(gate.0) || self.needs(table.0);
        Ok(self.push(t, Op::GatedTable { gate: gate.0, table: table.0 }, rg))
    }

    /// Diagonal Gaussian log-density summed over columns: `[B × n] -> [B × 1]`.
    pub fn gaussian_log_prob(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var, AutodiffError> {
        self.same_shape("gaussian_log_prob", x, mean)?;
        self.same_shape("gaussian_log_prob", x, log_std)?;
        let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(log_std));
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = gaussian_log_density(xv.row(r), mv.row(r), lv.row(r));
        }
        let t = Tensor::matrix(rows, 1, out)?;
        t.check_finite("gaussian_log_prob")?;
        let _ = cols;
        let rg = self.needs(x.0) || self.needs(mean.0) || self.needs(log_std.0);
        Ok(self.push(t, Op::GaussianLogProb { x: x.0, mean: mean.0, log_std: log_std.0 }, rg))
    }

    /// `out[b,m] = g[b,m] − max_{j≠m} g[b,j]`; needs at least two columns.
    pub fn exclusive_max_gap(&mut self, logits: Var) -> Result<Var, AutodiffError> {
        let v = self.value(logits);
        let (rows, m) = (v.rows(), v.cols());
        if m < 2 {
            return Err(shape_err("exclusive_max_gap", format!("need >= 2 columns, got {}", m)));
        }
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let row = v.row(r);
            let (first, second) = top_two(row);
            for j in 0..m {
                let other = if j == first { second } else { first };
                out[r * m + j] = row[j] - row[other];
            }
        }
        let t = Tensor::matrix(rows, m, out)?;
        Ok(self.unary(logits, t, Op::ExclusiveMaxGap(logits.0)))
    }

    /// `½ · (pop_std(x) / (mean(x) + eps))²` over all entries of `x`.
    pub fn half_cv_squared(&mut self, x: Var, eps: f64) -> Var {
        let v = half_cv_squared(self.value(x).values(), eps);
        self.unary(x, Tensor::scalar(v), Op::HalfCvSquared { x: x.0, eps })
    }

    /// Accumulates `∂loss/∂leaf` into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Usage { detail: "backward needs a scalar loss" });
        }
        if !self.needs(loss.0) {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => axpy(acc, 1.0, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(&self.leaf_grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let out = &nodes[i].value;
        match nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&nodes[x].value, &nodes[w].value);
                let (batch, n_in, n_out) = (xv.rows(), xv.cols(), wv.rows());
                if needs(x) {
                    let dx = slot(adj, nodes, x);
                    gemm(batch, n_out, n_in, (g, n_out, 1), (wv.values(), n_in, 1), 1.0, dx);
                }
                if needs(w) {
                    let dw = slot(adj, nodes, w);
                    gemm(n_out, batch, n_in, (g, 1, n_out), (xv.values(), n_in, 1), 1.0, dw);
                }
                if let Some(b) = b {
                    if needs(b) {
                        let db = slot(adj, nodes, b);
                        for r in 0..batch {
                            axpy(db, 1.0, &g[r * n_out..(r + 1) * n_out]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    axpy(slot(adj, nodes, a), 1.0, g);
                }
                if needs(b) {
                    axpy(slot(adj, nodes, b), 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    axpy(slot(adj, nodes, a), 1.0, g);
                }
                if needs(b) {
                    axpy(slot(adj, nodes, b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a].value.values(), nodes[b].value.values());
                if needs(a) {
                    for ((d, gi), bi) in slot(adj, nodes, a).iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if needs(b) {
                    for ((d, gi), ai) in slot(adj, nodes, b).iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => axpy(slot(adj, nodes, a), c, g),
            Op::AddScalar(a) => axpy(slot(adj, nodes, a), 1.0, g),
            Op::Tanh(a) => {
                for ((d, gi), y) in slot(adj, nodes, a).iter_mut().zip(g).zip(out.values()) {
                    *d += gi * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                for ((d, gi), y) in slot(adj, nodes, a).iter_mut().zip(g).zip(out.values()) {
                    if *y > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Exp(a) => {
                for ((d, gi), y) in slot(adj, nodes, a).iter_mut().zip(g).zip(out.values()) {
                    *d += gi * y;
                }
            }
            Op::Ln(a) => {
                let av = nodes[a].value.values();
                for ((d, gi), x) in slot(adj, nodes, a).iter_mut().zip(g).zip(av) {
                    *d += gi / x;
                }
            }
            Op::Square(a) => {
                let av = nodes[a].value.values();
                for ((d, gi), x) in slot(adj, nodes, a).iter_mut().zip(g).zip(av) {
                    *d += 2.0 * gi * x;
                }
            }
            Op::NormalCdf(a) => {
                let av = nodes[a].value.values();
                for ((d, gi), x) in slot(adj, nodes, a).iter_mut().zip(g).zip(av) {
                    *d += gi * INV_SQRT_2PI * libm::exp(-0.5 * x * x);
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (nodes[a].value.values(), nodes[b].value.values());
                if needs(a) {
                    let da = slot(adj, nodes, a);
                    for k in 0..g.len() {
                        if !(bv[k] < av[k]) {
                            da[k] += g[k];
                        }
                    }
                }
                if needs(b) {
                    let db = slot(adj, nodes, b);
                    for k in 0..g.len() {
                        if bv[k] < av[k] {
                            db[k] += g[k];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (nodes[a].value.cols(), nodes[b].value.cols());
                let rows = nodes[a].value.rows();
                let width = ca + cb;
                if needs(a) {
                    let da = slot(adj, nodes, a);
                    for r in 0..rows {
                        axpy(&mut da[r * ca..(r + 1) * ca], 1.0, &g[r * width..r * width + ca]);
                    }
                }
                if needs(b) {
                    let db = slot(adj, nodes, b);
                    for r in 0..rows {
                        axpy(&mut db[r * cb..(r + 1) * cb], 1.0, &g[r * width + ca..(r + 1) * width]);
                    }
                }
            }
            Op::SumAll(a) => {
                for d in slot(adj, nodes, a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll(a) => {
                let n = nodes[a].value.len().max(1) as f64;
                for d in slot(adj, nodes, a).iter_mut() {
                    *d += g[0] / n;
                }
            }
            Op::SumRows(a) => {
                let cols = nodes[a].value.cols();
                let da = slot(adj, nodes, a);
                for (r, gr) in g.iter().enumerate() {
                    for d in &mut da[r * cols..(r + 1) * cols] {
                        *d += gr;
                    }
                }
            }
            Op::SumCols(a) => {
                let (rows, cols) = (nodes[a].value.rows(), nodes[a].value.cols());
                let da = slot(adj, nodes, a);
                for r in 0..rows {
                    axpy(&mut da[r * cols..(r + 1) * cols], 1.0, g);
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let da = slot(adj, nodes, a);
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner = dot(p, gr);
                    for j in 0..cols {
                        da[r * cols + j] += p[j] * (gr[j] - inner);
                    }
                }
            }
            Op::StraightThroughTop1(a) => axpy(slot(adj, nodes, a), 1.0, g),
            Op::Mix { gate, y } => {
                let (gv, yv) = (&nodes[gate].value, &nodes[y].value);
                let (rows, m) = (gv.rows(), gv.cols());
                let w = yv.cols() / m;
                if needs(gate) {
                    let dg = slot(adj, nodes, gate);
                    for r in 0..rows {
                        let gr = &g[r * w..(r + 1) * w];
                        let yr = yv.row(r);
                        for k in 0..m {
                            dg[r * m + k] += dot(gr, &yr[k * w..(k + 1) * w]);
                        }
                    }
                }
                if needs(y) {
                    let dy = slot(adj, nodes, y);
                    let cols = m * w;
                    for r in 0..rows {
                        let gr = &g[r * w..(r + 1) * w];
                        for (k, &gk) in gv.row(r).iter().enumerate() {
                            if gk != 0.0 {
                                let base = r * cols + k * w;
                                axpy(&mut dy[base..base + w], gk, gr);
                            }
                        }
                    }
                }
            }
            Op::GatedTable { gate, table } => {
                let (gv, tv) = (&nodes[gate].value, &nodes[table].value);
                let (rows, m, w) = (gv.rows(), gv.cols(), tv.cols());
                if needs(gate) {
                    let dg = slot(adj, nodes, gate);
                    for r in 0..rows {
                        let gr = &g[r * w..(r + 1) * w];
                        for k in 0..m {
                            dg[r * m + k] += dot(gr, tv.row(k));
                        }
                    }
                }
                if needs(table) {
                    let dt = slot(adj, nodes, table);
                    for r in 0..rows {
                        let gr = &g[r * w..(r + 1) * w];
                        for (k, &gk) in gv.row(r).iter().enumerate() {
                            if gk != 0.0 {
                                axpy(&mut dt[k * w..(k + 1) * w], gk, gr);
                            }
                        }
                    }
                }
            }
            Op::GaussianLogProb { x, mean, log_std } => {
                let (xv, mv, lv) = (&nodes[x].value, &nodes[mean].value, &nodes[log_std].value);
                let n = xv.len();
                let cols = xv.cols();
                let mut dz = vec![0.0; n];
                let mut dl = vec![0.0; n];
                for k in 0..n {
                    let gr = g[k / cols];
                    let inv_sigma = libm::exp(-lv.values()[k]);
                    let z = (xv.values()[k] - mv.values()[k]) * inv_sigma;
                    // d/dx = -z/σ, d/dmean = z/σ, d/dlog σ = z² - 1
                    dz[k] = gr * z * inv_sigma;
                    dl[k] = gr * (z * z - 1.0);
                }
                if needs(x) {
                    axpy(slot(adj, nodes, x), -1.0, &dz);
                }
                if needs(mean) {
                    axpy(slot(adj, nodes, mean), 1.0, &dz);
                }
                if needs(log_std) {
                    axpy(slot(adj, nodes, log_std), 1.0, &dl);
                }
            }
            Op::ExclusiveMaxGap(a) => {
                let av = &nodes[a].value;
                let m = av.cols();
                let da = slot(adj, nodes, a);
                for r in 0..av.rows() {
                    let (first, second) = top_two(av.row(r));
                    for j in 0..m {
                        let gj = g[r * m + j];
                        let other = if j == first { second } else { first };
                        da[r * m + j] += gj;
                        da[r * m + other] -= gj;
                    }
                }
            }
            Op::HalfCvSquared { x, eps } => {
                let xv = nodes[x].value.values();
                let n = xv.len() as f64;
                let mu = xv.iter().sum::<f64>() / n;
                let var = xv.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let d = mu + eps;
                let (d2, d3) = (d * d, d * d * d);
                let dx = slot(adj, nodes, x);
                for (k, v) in xv.iter().enumerate() {
                    dx[k] += g[0] * ((v - mu) / (n * d2) - var / (n * d3));
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    let len = nodes[j].value.len();
    adj[j].get_or_insert_with(|| vec![0.0; len])
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn top_two(xs: &[f64]) -> (usize, usize) {
    let first = argmax(xs);
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &x) in xs.iter().enumerate() {
        if i != first && x > xs[second] {
            second = i;
        }
    }
    (first, second)
}

/// Numerically stable softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = libm::exp(l - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

/// `Σ_j log N(x_j; mean_j, exp(log_std_j)²)`
pub fn gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&x, &m), &ls) in x.iter().zip(mean).zip(log_std) {
        let z = (x - m) * libm::exp(-ls);
        acc += -0.5 * z * z - ls - HALF_LN_2PI;
    }
    acc
}

/// `½ · (pop_std(x) / (mean(x) + eps))²`
pub fn half_cv_squared(x: &[f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let d = mu + eps;
    0.5 * var / (d * d)
}
