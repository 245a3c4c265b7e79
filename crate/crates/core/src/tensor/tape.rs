//! Reverse-mode gradient tape.
//!
//! Primitives execute eagerly, store their output in a node arena, and (when
//! the tape is recording and the result depends on a gradient leaf) append a
//! record. `backward` walks the records in reverse execution order, which is
//! a valid topological order by construction, and accumulates adjoints. All
//! kernels are sequential with a fixed accumulation order, so two backward
//! passes over identically built graphs produce bit-identical gradients.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum Op<S> {
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddRowVec { m: usize, v: usize },
    MulRowVec { m: usize, v: usize },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Slice2d { a: usize, row0: usize, col0: usize, rows: usize, cols: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    GatherRows { table: usize, rows: Vec<usize> },
    RepeatRows { a: usize, times: usize },
    TileRows { a: usize, times: usize },
    SoftmaxRows { a: usize, scale: S },
    Gelu { a: usize },
    LayerNorm { a: usize, gain: usize, bias: usize },
    RepeatGroups { a: usize, group: usize },
    Sum { a: usize },
    Mean { a: usize },
}

struct Record<S> {
    out: usize,
    op: Op<S>,
}

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Ordered record of primitive operations, replayed in reverse for adjoints.
pub struct GradTape<S> {
    nodes: Vec<Node<S>>,
    records: Vec<Record<S>>,
    grads: Vec<Option<Vec<S>>>,
    recording: bool,
    consumed: bool,
}

impl<S: Scalar> Default for GradTape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GradTape<S> {
    /// Recording tape for training.
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), records: Vec::new(), grads: Vec::new(), recording: true, consumed: false }
    }

    /// Non-recording tape: same forward math, no adjoint bookkeeping.
    pub fn inference() -> Self {
        GradTape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn check_open(&self) -> TensorResult<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { data, shape, needs_grad: needs_grad && self.recording });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, out: Var, op: Op<S>) {
        if self.recording && self.nodes[out.0].needs_grad {
            self.records.push(Record { out: out.0, op });
        }
    }

    /// Register a tensor whose gradient is never needed.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false)
    }

    /// Register a tensor, tracking gradients iff it is flagged `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copy a node out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient of a node, populated by [`GradTape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rows_of(shape: &[usize]) -> (usize, usize) {
        let cols = *shape.last().unwrap();
        (shape.iter().product::<usize>() / cols, cols)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        self.check_open()?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<S> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x + y).collect();
        let out = self.push(self.nodes[a.0].shape.clone(), data, self.needs(a) || self.needs(b));
        self.record(out, Op::Add { a: a.0, b: b.0 });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<S> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x - y).collect();
        let out = self.push(self.nodes[a.0].shape.clone(), data, self.needs(a) || self.needs(b));
        self.record(out, Op::Sub { a: a.0, b: b.0 });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<S> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x * y).collect();
        let out = self.push(self.nodes[a.0].shape.clone(), data, self.needs(a) || self.needs(b));
        self.record(out, Op::Mul { a: a.0, b: b.0 });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: S) -> TensorResult<Var> {
        self.check_open()?;
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let out = self.push(self.nodes[a.0].shape.clone(), data, self.needs(a));
        self.record(out, Op::Scale { a: a.0, c });
        Ok(out)
    }

    // ---- broadcast over rows ----------------------------------------------

    fn row_vec_check(&self, op: &'static str, m: Var, v: Var) -> TensorResult<(usize, usize)> {
        let (rows, cols) = Self::rows_of(&self.nodes[m.0].shape);
        if self.nodes[v.0].shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[m.0].shape.clone(),
                right: self.nodes[v.0].shape.clone(),
            });
        }
        Ok((rows, cols))
    }

    /// `out[i, j] = m[i, j] + v[j]` (bias broadcast).
    pub fn add_row_vec(&mut self, m: Var, v: Var) -> TensorResult<Var> {
        self.check_open()?;
        let (rows, cols) = self.row_vec_check("add_row_vec", m, v)?;
        let mut data = self.nodes[m.0].data.clone();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            for (x, &b) in row.iter_mut().zip(&self.nodes[v.0].data) {
                *x += b;
            }
        }
        let out = self.push(self.nodes[m.0].shape.clone(), data, self.needs(m) || self.needs(v));
        self.record(out, Op::AddRowVec { m: m.0, v: v.0 });
        Ok(out)
    }

    /// `out[i, j] = m[i, j] * v[j]` (per-column scaling).
    pub fn mul_row_vec(&mut self, m: Var, v: Var) -> TensorResult<Var> {
        self.check_open()?;
        let (rows, cols) = self.row_vec_check("mul_row_vec", m, v)?;
        let mut data = self.nodes[m.0].data.clone();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            for (x, &s) in row.iter_mut().zip(&self.nodes[v.0].data) {
                *x *= s;
            }
        }
        let out = self.push(self.nodes[m.0].shape.clone(), data, self.needs(m) || self.needs(v));
        self.record(out, Op::MulRowVec { m: m.0, v: v.0 });
        Ok(out)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.check_open()?;
        let (m, k) = matrix_dims("matmul", &self.nodes[a.0].shape)?;
        let (k2, n) = matrix_dims("matmul", &self.nodes[b.0].shape)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![S::zero(); m * n];
        mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let out = self.push(vec![m, n], data, self.needs(a) || self.needs(b));
        self.record(out, Op::MatMul { a: a.0, b: b.0 });
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        self.check_open()?;
        let (r, c) = matrix_dims("transpose", &self.nodes[a.0].shape)?;
        let data = transposed(&self.nodes[a.0].data, r, c);
        let out = self.push(vec![c, r], data, self.needs(a));
        self.record(out, Op::Transpose { a: a.0 });
        Ok(out)
    }

    // ---- layout -----------------------------------------------------------

    pub fn slice2d(&mut self, a: Var, row0: usize, col0: usize, rows: usize, cols: usize) -> TensorResult<Var> {
        self.check_open()?;
        let (r, c) = matrix_dims("slice2d", &self.nodes[a.0].shape)?;
        if row0 + rows > r {
            return Err(TensorError::IndexOutOfRange { op: "slice2d", index: row0 + rows, extent: r });
        }
        if col0 + cols > c {
            return Err(TensorError::IndexOutOfRange { op: "slice2d", index: col0 + cols, extent: c });
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let base = (row0 + i) * c + col0;
            data.extend_from_slice(&src[base..base + cols]);
        }
        let out = self.push(vec![rows, cols], data, self.needs(a));
        self.record(out, Op::Slice2d { a: a.0, row0, col0, rows, cols });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        self.check_open()?;
        debug_assert!(!parts.is_empty());
        let (_, c) = matrix_dims("concat_rows", &self.nodes[parts[0].0].shape)?;
        let mut total_rows = 0;
        let mut needs = false;
        for &p in parts {
            let (r, pc) = matrix_dims("concat_rows", &self.nodes[p.0].shape)?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            total_rows += r;
            needs |= self.needs(p);
        }
        let mut data = Vec::with_capacity(total_rows * c);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let out = self.push(vec![total_rows, c], data, needs);
        self.record(out, Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect() });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        self.check_open()?;
        debug_assert!(!parts.is_empty());
        let (r, _) = matrix_dims("concat_cols", &self.nodes[parts[0].0].shape)?;
        let mut total_cols = 0;
        let mut needs = false;
        for &p in parts {
            let (pr, pc) = matrix_dims("concat_cols", &self.nodes[p.0].shape)?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            total_cols += pc;
            needs |= self.needs(p);
        }
        let mut data = vec![S::zero(); r * total_cols];
        let mut col0 = 0;
        for &p in parts {
            let (pr, pc) = matrix_dims("concat_cols", &self.nodes[p.0].shape)?;
            for i in 0..pr {
                let dst = i * total_cols + col0;
                data[dst..dst + pc].copy_from_slice(&self.nodes[p.0].data[i * pc..(i + 1) * pc]);
            }
            col0 += pc;
        }
        let out = self.push(vec![r, total_cols], data, needs);
        self.record(out, Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() });
        Ok(out)
    }

    /// Row lookup into an embedding table; duplicate indices accumulate on backward.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> TensorResult<Var> {
        self.check_open()?;
        let (r, c) = matrix_dims("gather_rows", &self.nodes[table.0].shape)?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &idx in rows {
            if idx >= r {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: idx, extent: r });
            }
            data.extend_from_slice(&self.nodes[table.0].data[idx * c..(idx + 1) * c]);
        }
        let out = self.push(vec![rows.len(), c], data, self.needs(table));
        self.record(out, Op::GatherRows { table: table.0, rows: rows.to_vec() });
        Ok(out)
    }

    /// Each row repeated `times` consecutive times: row `i` maps to rows `i*times..(i+1)*times`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> TensorResult<Var> {
        self.check_open()?;
        let (r, c) = matrix_dims("repeat_rows", &self.nodes[a.0].shape)?;
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            let row = &self.nodes[a.0].data[i * c..(i + 1) * c];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let out = self.push(vec![r * times, c], data, self.needs(a));
        self.record(out, Op::RepeatRows { a: a.0, times });
        Ok(out)
    }

    /// Whole matrix tiled `times` times along the row axis.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> TensorResult<Var> {
        self.check_open()?;
        let (r, c) = matrix_dims("tile_rows", &self.nodes[a.0].shape)?;
        let mut data = Vec::with_capacity(r * times * c);
        for _ in 0..times {
            data.extend_from_slice(&self.nodes[a.0].data);
        }
        let out = self.push(vec![r * times, c], data, self.needs(a));
        self.record(out, Op::TileRows { a: a.0, times });
        Ok(out)
    }

    // ---- nonlinearities ----------------------------------------------------

    /// Row-wise `softmax(scale * x)` over the trailing dimension, stabilized
    /// by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var, scale: S) -> TensorResult<Var> {
        self.check_open()?;
        let (rows, cols) = Self::rows_of(&self.nodes[a.0].shape);
        let mut data = vec![S::zero(); rows * cols];
        for i in 0..rows {
            let x = &self.nodes[a.0].data[i * cols..(i + 1) * cols];
            let y = &mut data[i * cols..(i + 1) * cols];
            softmax_row(x, scale, y);
        }
        let out = self.push(self.nodes[a.0].shape.clone(), data, self.needs(a));
        self.record(out, Op::SoftmaxRows { a: a.0, scale });
        Ok(out)
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> TensorResult<Var> {
        self.check_open()?;
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * x.gauss_cdf()).collect();
        let out = self.push(self.nodes[a.0].shape.clone(), data, self.needs(a));
        self.record(out, Op::Gelu { a: a.0 });
        Ok(out)
    }

    /// Per-row zero-mean unit-variance normalization over the trailing
    /// dimension (variance epsilon 1e-5), then the affine `gain, bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> TensorResult<Var> {
        self.check_open()?;
        let (rows, cols) = Self::rows_of(&self.nodes[a.0].shape);
        for (name, v) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            if self.nodes[v.0].shape != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: if name.ends_with("gain") { "layer_norm(gain)" } else { "layer_norm(bias)" },
                    left: self.nodes[a.0].shape.clone(),
                    right: self.nodes[v.0].shape.clone(),
                });
            }
        }
        let eps = S::from_f64_lossy(LAYER_NORM_EPS);
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![S::zero(); rows * cols];
        for i in 0..rows {
            let x = &self.nodes[a.0].data[i * cols..(i + 1) * cols];
            let y = &mut data[i * cols..(i + 1) * cols];
            let (mean, inv_std) = row_moments(x, eps);
            for j in 0..cols {
                y[j] = (x[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        let out = self.push(self.nodes[a.0].shape.clone(), data, needs);
        self.record(out, Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0 });
        Ok(out)
    }

    /// Expand a grouped vector: `out[j] = a[j / group]`, `out` of length
    /// `out_len`. Backward sums adjoints within each group.
    pub fn repeat_groups(&mut self, a: Var, group: usize, out_len: usize) -> TensorResult<Var> {
        self.check_open()?;
        let glen = self.nodes[a.0].data.len();
        if group == 0 || glen != out_len.div_ceil(group) {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_groups",
                left: self.nodes[a.0].shape.clone(),
                right: vec![out_len.div_ceil(group.max(1))],
            });
        }
        let src = &self.nodes[a.0].data;
        let data: Vec<S> = (0..out_len).map(|j| src[j / group]).collect();
        let out = self.push(vec![out_len], data, self.needs(a));
        self.record(out, Op::RepeatGroups { a: a.0, group });
        Ok(out)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        self.check_open()?;
        let mut s = S::zero();
        for &x in &self.nodes[a.0].data {
            s += x;
        }
        let out = self.push(vec![1], vec![s], self.needs(a));
        self.record(out, Op::Sum { a: a.0 });
        Ok(out)
    }

    pub fn mean(&mut self, a: Var) -> TensorResult<Var> {
        self.check_open()?;
        let n = S::from_f64_lossy(self.nodes[a.0].data.len() as f64);
        let mut s = S::zero();
        for &x in &self.nodes[a.0].data {
            s += x;
        }
        let out = self.push(vec![1], vec![s / n], self.needs(a));
        self.record(out, Op::Mean { a: a.0 });
        Ok(out)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // ---- backward -------------------------------------------------------------

    /// Populate gradients for every recorded ancestor of the scalar `loss`
    /// and consume the tape.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        self.check_open()?;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::one()]);

        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            let Some(gout) = self.grads[rec.out].take() else { continue };
            self.apply_backward(rec, &gout);
            self.grads[rec.out] = Some(gout);
        }
        self.consumed = true;
        Ok(())
    }

    fn grad_buf(&mut self, node: usize) -> &mut [S] {
        let len = self.nodes[node].data.len();
        self.grads[node].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn apply_backward(&mut self, rec: &Record<S>, gout: &[S]) {
        match &rec.op {
            Op::Add { a, b } => {
                for &i in [a, b].iter() {
                    if self.nodes[*i].needs_grad {
                        let g = self.grad_buf(*i);
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].needs_grad {
                    let g = self.grad_buf(*a);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let g = self.grad_buf(*b);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let other: Vec<S> = self.nodes[*b].data.clone();
                    let g = self.grad_buf(*a);
                    for ((gi, &go), &o) in g.iter_mut().zip(gout).zip(&other) {
                        *gi += go * o;
                    }
                }
                if self.nodes[*b].needs_grad {
                    let other: Vec<S> = self.nodes[*a].data.clone();
                    let g = self.grad_buf(*b);
                    for ((gi, &go), &o) in g.iter_mut().zip(gout).zip(&other) {
                        *gi += go * o;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].needs_grad {
                    let c = *c;
                    let g = self.grad_buf(*a);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                }
            }
            Op::AddRowVec { m, v } => {
                let (rows, cols) = Self::rows_of(&self.nodes[*m].shape);
                if self.nodes[*m].needs_grad {
                    let g = self.grad_buf(*m);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if self.nodes[*v].needs_grad {
                    let g = self.grad_buf(*v);
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += gout[i * cols + j];
                        }
                    }
                }
            }
            Op::MulRowVec { m, v } => {
                let (rows, cols) = Self::rows_of(&self.nodes[*m].shape);
                if self.nodes[*m].needs_grad {
                    let vdata = self.nodes[*v].data.clone();
                    let g = self.grad_buf(*m);
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] += gout[i * cols + j] * vdata[j];
                        }
                    }
                }
                if self.nodes[*v].needs_grad {
                    let mdata = self.nodes[*m].data.clone();
                    let g = self.grad_buf(*v);
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += gout[i * cols + j] * mdata[i * cols + j];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    // dA += g . B^T
                    let bt = transposed(&self.nodes[*b].data, k, n);
                    let mut da = vec![S::zero(); m * k];
                    mm_nn(gout, &bt, m, n, k, &mut da);
                    let g = self.grad_buf(*a);
                    for (gi, &d) in g.iter_mut().zip(&da) {
                        *gi += d;
                    }
                }
                if self.nodes[*b].needs_grad {
                    // dB += A^T . g
                    let at = transposed(&self.nodes[*a].data, m, k);
                    let mut db = vec![S::zero(); k * n];
                    mm_nn(&at, gout, k, m, n, &mut db);
                    let g = self.grad_buf(*b);
                    for (gi, &d) in g.iter_mut().zip(&db) {
                        *gi += d;
                    }
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    // gout has shape [c, r]
                    let gt = transposed(gout, c, r);
                    let g = self.grad_buf(*a);
                    for (gi, &d) in g.iter_mut().zip(&gt) {
                        *gi += d;
                    }
                }
            }
            Op::Slice2d { a, row0, col0, rows, cols } => {
                if self.nodes[*a].needs_grad {
                    let c = self.nodes[*a].shape[1];
                    let g = self.grad_buf(*a);
                    for i in 0..*rows {
                        let base = (row0 + i) * c + col0;
                        for j in 0..*cols {
                            g[base + j] += gout[i * cols + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut row0 = 0;
                for &p in parts {
                    let (r, c) = (self.nodes[p].shape[0], self.nodes[p].shape[1]);
                    if self.nodes[p].needs_grad {
                        let g = self.grad_buf(p);
                        let src = &gout[row0 * c..(row0 + r) * c];
                        for (gi, &d) in g.iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                    row0 += r;
                }
            }
            Op::ConcatCols { parts } => {
                let total_cols: usize = parts.iter().map(|&p| self.nodes[p].shape[1]).sum();
                let mut col0 = 0;
                for &p in parts {
                    let (r, c) = (self.nodes[p].shape[0], self.nodes[p].shape[1]);
                    if self.nodes[p].needs_grad {
                        let g = self.grad_buf(p);
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] += gout[i * total_cols + col0 + j];
                            }
                        }
                    }
                    col0 += c;
                }
            }
            Op::GatherRows { table, rows } => {
                if self.nodes[*table].needs_grad {
                    let c = self.nodes[*table].shape[1];
                    let g = self.grad_buf(*table);
                    for (i, &idx) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[idx * c + j] += gout[i * c + j];
                        }
                    }
                }
            }
            Op::RepeatRows { a, times } => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let g = self.grad_buf(*a);
                    for i in 0..r {
                        for t in 0..*times {
                            let src = (i * times + t) * c;
                            for j in 0..c {
                                g[i * c + j] += gout[src + j];
                            }
                        }
                    }
                }
            }
            Op::TileRows { a, times } => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let g = self.grad_buf(*a);
                    for t in 0..*times {
                        let base = t * r * c;
                        for i in 0..r * c {
                            g[i] += gout[base + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows { a, scale } => {
                if self.nodes[*a].needs_grad {
                    let (rows, cols) = Self::rows_of(&self.nodes[*a].shape);
                    let y = self.nodes[rec.out].data.clone();
                    let scale = *scale;
                    let g = self.grad_buf(*a);
                    for i in 0..rows {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &gout[i * cols..(i + 1) * cols];
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..cols {
                            g[i * cols + j] += scale * yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].needs_grad {
                    let x = self.nodes[*a].data.clone();
                    let g = self.grad_buf(*a);
                    for (j, &xi) in x.iter().enumerate() {
                        g[j] += gout[j] * (xi.gauss_cdf() + xi * xi.gauss_pdf());
                    }
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let (rows, cols) = Self::rows_of(&self.nodes[*a].shape);
                let eps = S::from_f64_lossy(LAYER_NORM_EPS);
                let x = &self.nodes[*a].data;
                let gvec = self.nodes[*gain].data.clone();
                // Recompute per-row moments; cheaper than saving them.
                let mut xhat = vec![S::zero(); rows * cols];
                let mut inv_stds = vec![S::zero(); rows];
                for i in 0..rows {
                    let xr = &x[i * cols..(i + 1) * cols];
                    let (mean, inv_std) = row_moments(xr, eps);
                    inv_stds[i] = inv_std;
                    for j in 0..cols {
                        xhat[i * cols + j] = (xr[j] - mean) * inv_std;
                    }
                }
                if self.nodes[*bias].needs_grad {
                    let g = self.grad_buf(*bias);
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += gout[i * cols + j];
                        }
                    }
                }
                if self.nodes[*gain].needs_grad {
                    let g = self.grad_buf(*gain);
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += gout[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if self.nodes[*a].needs_grad {
                    let n = S::from_f64_lossy(cols as f64);
                    let g = self.grad_buf(*a);
                    for i in 0..rows {
                        let xh = &xhat[i * cols..(i + 1) * cols];
                        let go = &gout[i * cols..(i + 1) * cols];
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..cols {
                            let dxh = go[j] * gvec[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh[j];
                        }
                        let mean_dxhat = sum_dxhat / n;
                        let mean_dxhat_xhat = sum_dxhat_xhat / n;
                        for j in 0..cols {
                            let dxh = go[j] * gvec[j];
                            g[i * cols + j] += inv_stds[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::RepeatGroups { a, group } => {
                if self.nodes[*a].needs_grad {
                    let g = self.grad_buf(*a);
                    for (j, &go) in gout.iter().enumerate() {
                        g[j / group] += go;
                    }
                }
            }
            Op::Sum { a } => {
                if self.nodes[*a].needs_grad {
                    let g0 = gout[0];
                    let g = self.grad_buf(*a);
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                }
            }
            Op::Mean { a } => {
                if self.nodes[*a].needs_grad {
                    let n = S::from_f64_lossy(self.nodes[*a].data.len() as f64);
                    let g0 = gout[0] / n;
                    let g = self.grad_buf(*a);
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                }
            }
        }
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> TensorResult<(usize, usize)> {
    if shape.len() == 2 {
        Ok((shape[0], shape[1]))
    } else {
        Err(TensorError::NotMatrix { op, shape: shape.to_vec() })
    }
}

/// `out += a . b` for row-major `a: m x k`, `b: k x n`. The k loop is the
/// middle loop so each output element accumulates in a fixed order.
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub(crate) fn transposed<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_row<S: Scalar>(x: &[S], scale: S, out: &mut [S]) {
    let mut mx = x[0] * scale;
    for &v in &x[1..] {
        if v * scale > mx {
            mx = v * scale;
        }
    }
    let mut denom = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v * scale - mx).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn row_moments<S: Scalar>(x: &[S], eps: S) -> (S, S) {
    let n = S::from_f64_lossy(x.len() as f64);
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, (var + eps).sqrt().recip())
}
