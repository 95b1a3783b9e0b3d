//! The recording tape: forward ops append nodes, `backward` replays them in
//! reverse.
//!
//! Operands are always created before their consumers, so node index order
//! is a topological order and the reverse sweep visits every consumer
//! before its producers. Leaves are either `param` (gradients wanted) or
//! `constant` (data, noise, adjacency); interior nodes only propagate into
//! operands that can reach a parameter, so constant-heavy graphs stay cheap.

use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use super::NumError;

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Multiply(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    RowL2Normalize(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Concat(usize, usize),
    GatherRows { x: usize, indices: Arc<Vec<usize>> },
    Affine { x: usize, scale: f64 },
    Powi { x: usize, exponent: i32 },
    Transpose(usize),
    NeighborMean { x: usize, adjacency: Arc<Vec<Vec<usize>>> },
    /// Quantized lookup with a straight-through gradient: the forward value
    /// is `codebook[indices]`, the backward pass copies the output gradient
    /// onto `h` unchanged and sends nothing to the codebook.
    StraightThrough { h: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    is_param: bool,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Always present for
    /// parameter leaves (zero-filled when the loss never touched them).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A forward-mode recording of tensor ops, replayable in reverse for
/// gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Tensor value computed for `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true, true)
    }

    /// Registers a non-trainable leaf (data, noise, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<Var, NumError> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    fn push(&mut self, op: Op, value: Tensor, is_param: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, is_param, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor, NumError> {
        if t.data().iter().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(NumError::NonFinite { op })
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(NumError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            })
        }
    }

    /// Matrix product `a . b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                detail: format!("{m}x{ka} . {kb}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, ka, n, &mut out);
        let value = Self::finite("matmul", Tensor::from_raw(m, n, out))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a.0, b.0), value, false, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let value = Self::finite("add", Tensor::from_raw(r, c, data))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), value, false, needs))
    }

    /// Elementwise (Hadamard) product.
    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("multiply", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        let value = Self::finite("multiply", Tensor::from_raw(r, c, data))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Multiply(a.0, b.0), value, false, needs))
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, op: Op, x: Var, name: &'static str, f: F, needs: bool) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        let data = self.nodes[x.0].value.data().iter().map(|&v| f(v)).collect();
        let value = Self::finite(name, Tensor::from_raw(r, c, data))?;
        Ok(self.push(op, value, false, needs))
    }

    /// `max(x, 0)` elementwise; the gradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let needs = self.needs(x);
        self.unary(Op::Relu(x.0), x, "relu", |v| v.max(0.0), needs)
    }

    /// Logistic function elementwise.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        let needs = self.needs(x);
        self.unary(Op::Sigmoid(x.0), x, "sigmoid", kernels::sigmoid, needs)
    }

    /// `e^x` elementwise; overflow to infinity is reported as an error.
    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        let needs = self.needs(x);
        self.unary(Op::Exp(x.0), x, "exp", f64::exp, needs)
    }

    /// Natural log elementwise; any entry `<= 0` is an error.
    pub fn log(&mut self, x: Var) -> Result<Var, NumError> {
        if let Some(&bad) = self.nodes[x.0].value.data().iter().find(|v| **v <= 0.0) {
            return Err(NumError::LogNonPositive { value: bad });
        }
        let needs = self.needs(x);
        self.unary(Op::Log(x.0), x, "log", f64::ln, needs)
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, NumError> {
        if !scale.is_finite() || !shift.is_finite() {
            return Err(NumError::Invalid(format!("affine with scale {scale}, shift {shift}")));
        }
        let needs = self.needs(x);
        self.unary(Op::Affine { x: x.0, scale }, x, "affine", |v| scale * v + shift, needs)
    }

    /// `x^exponent` elementwise for integer `exponent >= 1`.
    pub fn powi(&mut self, x: Var, exponent: i32) -> Result<Var, NumError> {
        if exponent < 1 {
            return Err(NumError::Invalid(format!("powi exponent must be >= 1, got {exponent}")));
        }
        let needs = self.needs(x);
        self.unary(Op::Powi { x: x.0, exponent }, x, "powi", |v| v.powi(exponent), needs)
    }

    /// Softmax over each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(NumError::Invalid("row_softmax of zero-width rows".into()));
        }
        let mut out = vec![0.0; r * c];
        kernels::row_softmax(self.nodes[x.0].value.data(), c, &mut out);
        let needs = self.needs(x);
        Ok(self.push(Op::RowSoftmax(x.0), Tensor::from_raw(r, c, out), false, needs))
    }

    /// Log-softmax over each row; more stable than `log(row_softmax(x))`.
    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(NumError::Invalid("row_log_softmax of zero-width rows".into()));
        }
        let mut out = vec![0.0; r * c];
        kernels::row_log_softmax(self.nodes[x.0].value.data(), c, &mut out);
        let needs = self.needs(x);
        Ok(self.push(Op::RowLogSoftmax(x.0), Tensor::from_raw(r, c, out), false, needs))
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero (and get a
    /// zero gradient).
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::RowL2Normalize(x.0), Tensor::from_raw(r, c, out), false, needs))
    }

    /// Sum of all entries, as a scalar. Addends are sorted by value first,
    /// so the result is invariant under any reordering of rows or columns.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let mut vals = self.nodes[x.0].value.data().to_vec();
        let value = Self::finite("sum", Tensor::from_raw(1, 1, vec![kernels::sorted_sum(&mut vals)]))?;
        let needs = self.needs(x);
        Ok(self.push(Op::Sum(x.0), value, false, needs))
    }

    /// Mean of all entries, as a scalar; same ordering guarantee as `sum`.
    pub fn mean(&mut self, x: Var) -> Result<Var, NumError> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(NumError::Invalid("mean of empty tensor".into()));
        }
        let mut vals = self.nodes[x.0].value.data().to_vec();
        let m = kernels::sorted_sum(&mut vals) / n as f64;
        let value = Self::finite("mean", Tensor::from_raw(1, 1, vec![m]))?;
        let needs = self.needs(x);
        Ok(self.push(Op::Mean(x.0), value, false, needs))
    }

    /// Column means over all rows (`t x d` -> `1 x d`), each column summed
    /// in value order so row permutations cannot change the result.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(NumError::Invalid("mean_rows of empty tensor".into()));
        }
        let mut out = vec![0.0; c];
        kernels::column_mean_sorted(self.nodes[x.0].value.data(), r, c, &mut out);
        let needs = self.needs(x);
        Ok(self.push(Op::MeanRows(x.0), Tensor::from_raw(1, c, out), false, needs))
    }

    /// Concatenates columns: `m x a` and `m x b` -> `m x (a+b)`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(NumError::ShapeMismatch {
                op: "concat",
                detail: format!("{ra}x{ca} vs {rb}x{cb}"),
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat(a.0, b.0), Tensor::from_raw(ra, ca + cb, out), false, needs))
    }

    /// Selects rows of `x` by index, duplicates allowed; gradients
    /// scatter-add back onto the source rows.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(NumError::RowOutOfRange { index: bad, rows: r });
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherRows { x: x.0, indices: indices.clone() },
            Tensor::from_raw(indices.len(), c, out),
            false,
            needs,
        ))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let value = self.nodes[x.0].value.transposed();
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x.0), value, false, needs))
    }

    /// Mean over each node's neighbor rows (isolated nodes get zero rows).
    /// `adjacency` must be symmetric — the backward pass relies on
    /// `u in NB(v) <=> v in NB(u)`.
    pub fn neighbor_mean(&mut self, x: Var, adjacency: Arc<Vec<Vec<usize>>>) -> Result<Var, NumError> {
        let (r, c) = self.shape(x);
        if adjacency.len() != r {
            return Err(NumError::ShapeMismatch {
                op: "neighbor_mean",
                detail: format!("{} adjacency rows for {r} feature rows", adjacency.len()),
            });
        }
        if let Some(&bad) = adjacency.iter().flatten().find(|&&v| v >= r) {
            return Err(NumError::RowOutOfRange { index: bad, rows: r });
        }
        let mut out = vec![0.0; r * c];
        kernels::neighbor_mean(self.nodes[x.0].value.data(), c, &adjacency, &mut out);
        let needs = self.needs(x);
        Ok(self.push(
            Op::NeighborMean { x: x.0, adjacency },
            Tensor::from_raw(r, c, out),
            false,
            needs,
        ))
    }

    /// Hard codebook lookup with a straight-through gradient. The value is
    /// `codebook[indices]` (one row per index); backward passes the output
    /// gradient to `h` unchanged and nothing to `codebook`.
    pub fn straight_through(
        &mut self,
        h: Var,
        codebook: Var,
        indices: Arc<Vec<usize>>,
    ) -> Result<Var, NumError> {
        let (n, d) = self.shape(h);
        let (k, dc) = self.shape(codebook);
        if d != dc || n != indices.len() {
            return Err(NumError::ShapeMismatch {
                op: "straight_through",
                detail: format!("h {n}x{d}, codebook {k}x{dc}, {} indices", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(NumError::RowOutOfRange { index: bad, rows: k });
        }
        let ev = self.nodes[codebook.0].value.data();
        let mut out = Vec::with_capacity(n * d);
        for &i in indices.iter() {
            out.extend_from_slice(&ev[i * d..(i + 1) * d]);
        }
        let needs = self.needs(h);
        Ok(self.push(Op::StraightThrough { h: h.0 }, Tensor::from_raw(n, d, out), false, needs))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// reachable node; parameter leaves the loss never touched get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let out = &self.nodes[loss.0].value;
        if !out.is_scalar() {
            return Err(NumError::NonScalarOutput { rows: out.rows(), cols: out.cols() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            if self.nodes[idx].is_param {
                grads[idx] = Some(g);
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_param && grads[idx].is_none() {
                let (r, c) = node.value.shape();
                grads[idx] = Some(Tensor::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: usize,
        contribution: Tensor,
    ) -> Result<(), NumError> {
        if !self.nodes[target].needs_grad {
            return Ok(());
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumError> {
        let val = |i: usize| -> &Tensor { &self.nodes[i].value };
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::Matmul(a, b) => {
                let (m, n) = g.shape();
                let k = val(*a).cols();
                if self.nodes[*a].needs_grad {
                    let bt = val(*b).transposed();
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g.data(), bt.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::from_raw(m, k, da))?;
                }
                if self.nodes[*b].needs_grad {
                    let at = val(*a).transposed();
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(at.data(), g.data(), k, m, n, &mut db);
                    self.accumulate(grads, *b, Tensor::from_raw(k, n, db))?;
                }
                Ok(())
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())
            }
            Op::Multiply(a, b) => {
                if self.nodes[*a].needs_grad {
                    let da = elementwise(g, val(*b), |gi, bi| gi * bi);
                    self.accumulate(grads, *a, da)?;
                }
                if self.nodes[*b].needs_grad {
                    let db = elementwise(g, val(*a), |gi, ai| gi * ai);
                    self.accumulate(grads, *b, db)?;
                }
                Ok(())
            }
            Op::Relu(x) => {
                let dx = elementwise(g, val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *x, dx)
            }
            Op::Sigmoid(x) => {
                let dx = elementwise(g, &self.nodes[idx].value, |gi, yi| gi * yi * (1.0 - yi));
                self.accumulate(grads, *x, dx)
            }
            Op::Exp(x) => {
                let dx = elementwise(g, &self.nodes[idx].value, |gi, yi| gi * yi);
                self.accumulate(grads, *x, dx)
            }
            Op::Log(x) => {
                let dx = elementwise(g, val(*x), |gi, xi| gi / xi);
                self.accumulate(grads, *x, dx)
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                let dx = elementwise(g, g, |gi, _| gi * s);
                self.accumulate(grads, *x, dx)
            }
            Op::Powi { x, exponent } => {
                let k = *exponent;
                let dx = elementwise(g, val(*x), |gi, xi| gi * f64::from(k) * xi.powi(k - 1));
                self.accumulate(grads, *x, dx)
            }
            Op::RowSoftmax(x) => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.shape();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(r, c, dx))
            }
            Op::RowLogSoftmax(x) => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.shape();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(r, c, dx))
            }
            Op::RowL2Normalize(x) => {
                let y = &self.nodes[idx].value;
                let xv = val(*x);
                let (r, c) = y.shape();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(r, c, dx))
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::from_raw(r, c, vec![gv; r * c]))
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                let gv = g.data()[0] / (r * c) as f64;
                self.accumulate(grads, *x, Tensor::from_raw(r, c, vec![gv; r * c]))
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).shape();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(r, c, dx))
            }
            Op::Concat(a, b) => {
                let (r, ca) = val(*a).shape();
                let cb = val(*b).cols();
                if self.nodes[*a].needs_grad {
                    let mut da = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        da.extend_from_slice(&g.row(i)[..ca]);
                    }
                    self.accumulate(grads, *a, Tensor::from_raw(r, ca, da))?;
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        db.extend_from_slice(&g.row(i)[ca..]);
                    }
                    self.accumulate(grads, *b, Tensor::from_raw(r, cb, db))?;
                }
                Ok(())
            }
            Op::GatherRows { x, indices } => {
                let (r, c) = val(*x).shape();
                let mut dx = vec![0.0; r * c];
                for (pos, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g.data()[pos * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(r, c, dx))
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transposed()),
            Op::NeighborMean { x, adjacency } => {
                let (r, c) = val(*x).shape();
                let mut dx = vec![0.0; r * c];
                kernels::neighbor_mean_backward(g.data(), c, adjacency, &mut dx);
                self.accumulate(grads, *x, Tensor::from_raw(r, c, dx))
            }
            Op::StraightThrough { h } => self.accumulate(grads, *h, g.clone()),
        }
    }
}

fn elementwise<F: Fn(f64, f64) -> f64>(a: &Tensor, b: &Tensor, f: F) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_raw(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 3, &[1.0, -2.0, 3.0]));
        let sq = tape.multiply(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 14.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn matmul_gradients_match_linear_form() {
        // loss = sum(A . B) -> dA = row sums of B broadcast, dB = col sums of A.
        let mut tape = Tape::new();
        let a = tape.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        let unused = tape.param(t(2, 2, &[1.0; 4]));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        let c = tape.constant(t(1, 2, &[3.0, 4.0]));
        let prod = tape.multiply(x, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_roots() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 2, &[1.0; 4]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(NumError::NonScalarOutput { .. })));
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(NumError::LogNonPositive { value }) if value == 0.0));
    }

    #[test]
    fn exp_overflow_is_an_error_not_infinity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(1, 1, &[1e6]));
        assert!(matches!(tape.exp(x), Err(NumError::NonFinite { op: "exp" })));
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let x = tape.param(t(3, 1, &[1.0, 2.0, 3.0]));
        let picked = tape.gather_rows(x, Arc::new(vec![0, 2, 0])).unwrap();
        assert_eq!(tape.value(picked).data(), &[1.0, 3.0, 1.0]);
        let loss = tape.sum(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 1, &[1.0, 2.0]));
        let err = tape.gather_rows(x, Arc::new(vec![0, 2])).unwrap_err();
        assert!(matches!(err, NumError::RowOutOfRange { index: 2, rows: 2 }));
    }

    #[test]
    fn concat_splits_gradient_between_operands() {
        let mut tape = Tape::new();
        let a = tape.param(t(2, 1, &[1.0, 2.0]));
        let b = tape.param(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(cat).row(0), &[1.0, 3.0, 4.0]);
        // Weight the columns so the split is visible.
        let w = tape.constant(t(2, 3, &[1.0, 10.0, 100.0, 1.0, 10.0, 100.0]));
        let weighted = tape.multiply(cat, w).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[10.0, 100.0, 10.0, 100.0]);
    }

    #[test]
    fn straight_through_copies_gradient_to_h_only() {
        let mut tape = Tape::new();
        let h = tape.param(t(2, 2, &[0.1, 0.2, 0.3, 0.4]));
        let e = tape.param(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let q = tape.straight_through(h, e, Arc::new(vec![2, 0])).unwrap();
        assert_eq!(tape.value(q).data(), &[5.0, 6.0, 1.0, 2.0]);
        let w = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let weighted = tape.multiply(q, w).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(h).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads.get(e).unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn row_l2_normalize_handles_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 2, &[3.0, 4.0, 0.0, 0.0]));
        let y = tape.row_l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.6, 0.8]);
        assert_eq!(tape.value(y).row(1), &[0.0, 0.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().row(1), &[0.0, 0.0]);
    }

    #[test]
    fn value_reuse_accumulates_gradients() {
        // loss = sum(x) + mean(x) -> grad = 1 + 1/n.
        let mut tape = Tape::new();
        let x = tape.param(t(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x).unwrap();
        let m = tape.mean(x).unwrap();
        let loss = tape.add(s, m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.25; 4]);
    }

    #[test]
    fn mean_rows_averages_columns() {
        let mut tape = Tape::new();
        let x = tape.param(t(2, 2, &[1.0, 10.0, 3.0, 30.0]));
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 20.0]);
        let loss = tape.sum(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5; 4]);
    }
}
