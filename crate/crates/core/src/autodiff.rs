//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] holds an eagerly-evaluated expression graph of 2-D arrays
//! (vectors are `[n,1]`/`[1,n]`, scalars `[1,1]`). Operations append nodes
//! and return [`Var`] handles; [`Tape::backward`] walks the graph in reverse
//! and accumulates gradients for every node, so callers can read gradients
//! with respect to inputs (pixels) and parameters alike.
//!
//! The op set is exactly what a masked vision-transformer forward pass and
//! its attack losses need; each op's adjoint is validated against central
//! finite differences in the unit tests below.

use ndarray::{s, Array2, Axis};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Global count of `backward` invocations, used to assert that evaluation
/// paths never compute gradients.
static BACKWARD_CALLS: AtomicU64 = AtomicU64::new(0);

/// Total number of `Tape::backward` calls in this process.
pub fn backward_call_count() -> u64 {
    BACKWARD_CALLS.load(Ordering::Relaxed)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Payload {
    Owned(Array2<f64>),
    Shared(Arc<Array2<f64>>),
}

impl Payload {
    fn array(&self) -> &Array2<f64> {
        match self {
            Payload::Owned(a) => a,
            Payload::Shared(a) => a,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m,n] + [1,n]`, broadcast down rows.
    AddRow(Var, Var),
    /// `[m,n] * [1,n]`, broadcast down rows.
    MulRow(Var, Var),
    /// `[m,n] * [m,1]`, broadcast across columns (row scaling).
    MulCol(Var, Var),
    /// `[m,n] * [1,1]`.
    MulScalarVar(Var, Var),
    /// `[m,n] / [1,1]`.
    DivScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddConstMat(Var),
    MulConstMat(Var, Array2<f64>),
    Transpose(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    /// Sum along axis 1: `[m,n] -> [m,1]`.
    SumCols(Var),
    /// Sum along axis 0: `[m,n] -> [1,n]`.
    SumRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// Straight-through threshold at 0.5: forward is `1[x > 0.5]`, backward
    /// passes the gradient unchanged.
    Ste(Var),
    /// Rearrange a `[H*W, C]` pixel matrix into `[(H/P)*(W/P), P*P*C]`
    /// patch rows (row-major patches, row-major pixels within a patch).
    ExtractPatches {
        image: Var,
        image_size: usize,
        patch_size: usize,
        channels: usize,
    },
}

struct Node {
    value: Payload,
    op: Op,
}

/// Eagerly-evaluated autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexable by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zero-filled if the node was never
    /// reached during the backward sweep.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(v).raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.array()
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Payload::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding an owned value (inputs the caller wants gradients for).
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf sharing a parameter array without copying it.
    pub fn shared(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value: Payload::Shared(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (gradient computed but normally ignored).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        assert_eq!(self.value(a).nrows(), self.value(col).nrows());
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn mul_scalar_var(&mut self, a: Var, scalar: Var) -> Var {
        assert_eq!(self.value(scalar).dim(), (1, 1));
        let c = self.scalar(scalar);
        let v = self.value(a) * c;
        self.push(v, Op::MulScalarVar(a, scalar))
    }

    pub fn div_scalar_var(&mut self, a: Var, scalar: Var) -> Var {
        assert_eq!(self.value(scalar).dim(), (1, 1));
        let c = self.scalar(scalar);
        let v = self.value(a) / c;
        self.push(v, Op::DivScalarVar(a, scalar))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn add_const_mat(&mut self, a: Var, m: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), m.dim());
        let v = self.value(a) + &m;
        self.push(v, Op::AddConstMat(a))
    }

    pub fn mul_const_mat(&mut self, a: Var, m: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), m.dim());
        let v = self.value(a) * &m;
        self.push(v, Op::MulConstMat(a, m))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.value(a).nrows());
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.value(a).ncols());
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let ncols = self.value(parts[0]).ncols();
        let nrows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Array2::zeros((nrows, ncols));
        let mut r = 0;
        for p in parts {
            let a = self.value(*p);
            assert_eq!(a.ncols(), ncols);
            v.slice_mut(s![r..r + a.nrows(), ..]).assign(a);
            r += a.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let nrows = self.value(parts[0]).nrows();
        let ncols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Array2::zeros((nrows, ncols));
        let mut c = 0;
        for p in parts {
            let a = self.value(*p);
            assert_eq!(a.nrows(), nrows);
            v.slice_mut(s![.., c..c + a.ncols()]).assign(a);
            c += a.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).mean().unwrap());
        self.push(v, Op::MeanAll(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .to_owned();
        self.push(v, Op::SumCols(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .to_owned();
        self.push(v, Op::SumRows(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Numerically stable row softmax.
    ///
    /// Accumulations are strictly sequential so a key excluded by a large
    /// negative logit (weight underflows to exactly 0) yields bit-identical
    /// results to removing it from the row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let mut sum = 0.0;
            for e in row.iter() {
                sum += *e;
            }
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learnable scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.value(x).dim();
        assert_eq!(self.value(gamma).dim(), (1, d));
        assert_eq!(self.value(beta).dim(), (1, d));
        let mut v = Array2::zeros((n, d));
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        for i in 0..n {
            let row = xv.row(i);
            let (mu, var) = row_mean_var(row.iter().cloned());
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                v[(i, j)] = g[(0, j)] * (row[j] - mu) * inv + b[(0, j)];
            }
        }
        self.push(v, Op::LayerNormRows { x, gamma, beta, eps })
    }

    /// Straight-through hard threshold at 0.5.
    pub fn ste_threshold(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.5 { 1.0 } else { 0.0 });
        self.push(v, Op::Ste(a))
    }

    /// Rearrange pixels into patch rows; see [`Op::ExtractPatches`].
    pub fn extract_patches(
        &mut self,
        image: Var,
        image_size: usize,
        patch_size: usize,
        channels: usize,
    ) -> Var {
        let img = self.value(image);
        assert_eq!(img.dim(), (image_size * image_size, channels));
        let grid = image_size / patch_size;
        let pdim = patch_size * patch_size * channels;
        let mut v = Array2::zeros((grid * grid, pdim));
        for pr in 0..grid {
            for pc in 0..grid {
                let patch_idx = pr * grid + pc;
                for r in 0..patch_size {
                    for c in 0..patch_size {
                        let pix = (pr * patch_size + r) * image_size + (pc * patch_size + c);
                        for ch in 0..channels {
                            v[(patch_idx, (r * patch_size + c) * channels + ch)] =
                                img[(pix, ch)];
                        }
                    }
                }
            }
        }
        self.push(
            v,
            Op::ExtractPatches {
                image,
                image_size,
                patch_size,
                channels,
            },
        )
    }

    /// Reverse sweep from a `[1,1]` loss node; returns gradients for every
    /// node reachable from it.
    pub fn backward(&self, loss: Var) -> Gradients {
        BACKWARD_CALLS.fetch_add(1, Ordering::Relaxed);
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward() requires a scalar loss node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, g * self.value(*b));
                self.add_grad(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                self.add_grad(grads, *a, g.clone());
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.add_grad(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                self.add_grad(grads, *a, g * self.value(*row));
                let dr = (g * self.value(*a))
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                self.add_grad(grads, *row, dr);
            }
            Op::MulCol(a, col) => {
                self.add_grad(grads, *a, g * self.value(*col));
                let dc = (g * self.value(*a))
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                self.add_grad(grads, *col, dc);
            }
            Op::MulScalarVar(a, sc) => {
                let c = self.scalar(*sc);
                self.add_grad(grads, *a, g * c);
                let ds = (g * self.value(*a)).sum();
                self.add_grad(grads, *sc, Array2::from_elem((1, 1), ds));
            }
            Op::DivScalarVar(a, sc) => {
                let c = self.scalar(*sc);
                self.add_grad(grads, *a, g / c);
                let ds = -(g * self.value(*a)).sum() / (c * c);
                self.add_grad(grads, *sc, Array2::from_elem((1, 1), ds));
            }
            Op::Scale(a, c) => self.add_grad(grads, *a, g * *c),
            Op::AddScalar(a) => self.add_grad(grads, *a, g.clone()),
            Op::AddConstMat(a) => self.add_grad(grads, *a, g.clone()),
            Op::MulConstMat(a, m) => self.add_grad(grads, *a, g * m),
            Op::Transpose(a) => self.add_grad(grads, *a, g.t().to_owned()),
            Op::SliceRows(a, start, end) => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                da.slice_mut(s![*start..*end, ..]).assign(g);
                self.add_grad(grads, *a, da);
            }
            Op::SliceCols(a, start, end) => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                da.slice_mut(s![.., *start..*end]).assign(g);
                self.add_grad(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    let dp = g.slice(s![r..r + n, ..]).to_owned();
                    self.add_grad(grads, *p, dp);
                    r += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    let dp = g.slice(s![.., c..c + n]).to_owned();
                    self.add_grad(grads, *p, dp);
                    c += n;
                }
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.value(*a).raw_dim(), g[(0, 0)]);
                self.add_grad(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let da = Array2::from_elem(self.value(*a).raw_dim(), g[(0, 0)] / n);
                self.add_grad(grads, *a, da);
            }
            Op::SumCols(a) => {
                let (m, n) = self.value(*a).dim();
                let mut da = Array2::zeros((m, n));
                for i in 0..m {
                    let gi = g[(i, 0)];
                    da.row_mut(i).fill(gi);
                }
                self.add_grad(grads, *a, da);
            }
            Op::SumRows(a) => {
                let (m, n) = self.value(*a).dim();
                let mut da = Array2::zeros((m, n));
                for j in 0..n {
                    let gj = g[(0, j)];
                    da.column_mut(j).fill(gj);
                }
                self.add_grad(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(id));
                let da = g * &y.mapv(|v| v * (1.0 - v));
                self.add_grad(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g * &self.value(*a).mapv(gelu_grad);
                self.add_grad(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = g * self.value(Var(id));
                self.add_grad(grads, *a, da);
            }
            Op::Ln(a) => {
                let da = g / self.value(*a);
                self.add_grad(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let da = g * &self.value(Var(id)).mapv(|y| 0.5 / y);
                self.add_grad(grads, *a, da);
            }
            Op::Square(a) => {
                let da = g * &(self.value(*a) * 2.0);
                self.add_grad(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(id));
                let mut da = Array2::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let dot: f64 = y
                        .row(i)
                        .iter()
                        .zip(g.row(i).iter())
                        .map(|(yi, gi)| yi * gi)
                        .sum();
                    for j in 0..y.ncols() {
                        da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (n, d) = xv.dim();
                let mut dx = Array2::zeros((n, d));
                let mut dgamma = Array2::zeros((1, d));
                let mut dbeta = Array2::zeros((1, d));
                for i in 0..n {
                    let row = xv.row(i);
                    let (mu, var) = row_mean_var(row.iter().cloned());
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|e| (e - mu) * inv).collect();
                    // dL/dxhat_j = g_j * gamma_j
                    let gxhat: Vec<f64> =
                        (0..d).map(|j| g[(i, j)] * gv[(0, j)]).collect();
                    let mean_g: f64 = gxhat.iter().sum::<f64>() / d as f64;
                    let mean_gx: f64 = gxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dx[(i, j)] = inv * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                        dgamma[(0, j)] += g[(i, j)] * xhat[j];
                        dbeta[(0, j)] += g[(i, j)];
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gamma, dgamma);
                self.add_grad(grads, *beta, dbeta);
            }
            Op::Ste(a) => self.add_grad(grads, *a, g.clone()),
            Op::ExtractPatches {
                image,
                image_size,
                patch_size,
                channels,
            } => {
                let grid = image_size / patch_size;
                let mut da = Array2::zeros((image_size * image_size, *channels));
                for pr in 0..grid {
                    for pc in 0..grid {
                        let patch_idx = pr * grid + pc;
                        for r in 0..*patch_size {
                            for c in 0..*patch_size {
                                let pix = (pr * patch_size + r) * image_size
                                    + (pc * patch_size + c);
                                for ch in 0..*channels {
                                    da[(pix, ch)] +=
                                        g[(patch_idx, (r * patch_size + c) * channels + ch)];
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *image, da);
            }
        }
    }
}

fn row_mean_var(row: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in row.clone() {
        sum += v;
        n += 1;
    }
    let mu = sum / n as f64;
    let mut var = 0.0;
    for v in row {
        var += (v - mu) * (v - mu);
    }
    (mu, var / n as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Central finite-difference gradient of a scalar function of a matrix.
///
/// Used throughout the test suites as the independent oracle for every
/// analytic gradient on the tape.
pub fn finite_difference<F>(f: F, x0: &Array2<f64>, step: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let (i, j) = (idx / x0.ncols(), idx % x0.ncols());
        let orig = x[(i, j)];
        x[(i, j)] = orig + step;
        let fp = f(&x);
        x[(i, j)] = orig - step;
        let fm = f(&x);
        x[(i, j)] = orig;
        grad[(i, j)] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative L2 error between an analytic and a reference gradient.
pub fn relative_error(analytic: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let diff = (analytic - reference).mapv(|x| x * x).sum().sqrt();
    let norm = reference.mapv(|x| x * x).sum().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::substream(seed, "autodiff-test", 0);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Check d(sum of some smooth readout of op output)/d(input) against FD.
    fn check<F>(build: F, x0: Array2<f64>)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let out = build(&mut tape, x);
        // squash to scalar through a fixed weighting so every entry matters
        let w = Array2::from_shape_fn(tape.value(out).raw_dim(), |(i, j)| {
            0.3 + 0.1 * (i as f64) - 0.07 * (j as f64)
        });
        let weighted = tape.mul_const_mat(out, w.clone());
        let loss = tape.sum_all(weighted);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(&tape, x);

        let fd = finite_difference(
            |xv| {
                let mut t = Tape::new();
                let xi = t.input(xv.clone());
                let o = build(&mut t, xi);
                let wv = t.mul_const_mat(o, w.clone());
                let l = t.sum_all(wv);
                t.scalar(l)
            },
            &x0,
            1e-6,
        );
        let err = relative_error(&analytic, &fd);
        assert!(err < 1e-7, "relative error {err} too large");
    }

    #[test]
    fn grad_matmul() {
        let b = rand_mat(4, 3, 2);
        check(
            move |t, x| {
                let bv = t.constant(b.clone());
                t.matmul(x, bv)
            },
            rand_mat(2, 4, 1),
        );
    }

    #[test]
    fn grad_matmul_rhs() {
        let a = rand_mat(3, 4, 5);
        check(
            move |t, x| {
                let av = t.constant(a.clone());
                t.matmul(av, x)
            },
            rand_mat(4, 2, 6),
        );
    }

    #[test]
    fn grad_elementwise_chain() {
        check(
            |t, x| {
                let s = t.sigmoid(x);
                let g = t.gelu(s);
                let q = t.square(g);
                t.add_scalar(q, 0.3)
            },
            rand_mat(3, 3, 7),
        );
    }

    #[test]
    fn grad_exp_ln_sqrt() {
        check(
            |t, x| {
                let e = t.exp(x);
                let l = t.ln(e); // identity, but exercises both adjoints
                let sq = t.square(l);
                let shifted = t.add_scalar(sq, 2.0);
                t.sqrt(shifted)
            },
            rand_mat(2, 5, 8),
        );
    }

    #[test]
    fn grad_softmax_rows() {
        check(|t, x| t.softmax_rows(x), rand_mat(3, 5, 9));
    }

    #[test]
    fn grad_softmax_with_additive_mask() {
        let mask = array![[0.0, -1e9, 0.0, 0.0], [0.0, 0.0, -1e9, 0.0]];
        check(
            move |t, x| {
                let m = t.add_const_mat(x, mask.clone());
                t.softmax_rows(m)
            },
            rand_mat(2, 4, 10),
        );
    }

    #[test]
    fn grad_layer_norm() {
        let g0 = rand_mat(1, 6, 11);
        let b0 = rand_mat(1, 6, 12);
        check(
            move |t, x| {
                let gm = t.constant(g0.clone());
                let bt = t.constant(b0.clone());
                t.layer_norm_rows(x, gm, bt, 1e-5)
            },
            rand_mat(4, 6, 13),
        );
    }

    #[test]
    fn grad_layer_norm_params() {
        // gradient w.r.t. gamma/beta
        let x0 = rand_mat(4, 6, 14);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let gamma0 = rand_mat(1, 6, 15);
        let beta0 = rand_mat(1, 6, 16);
        let gm = tape.input(gamma0.clone());
        let bt = tape.input(beta0.clone());
        let y = tape.layer_norm_rows(x, gm, bt, 1e-5);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);

        let fd_gamma = finite_difference(
            |gv| {
                let mut t = Tape::new();
                let xi = t.input(x0.clone());
                let gi = t.input(gv.clone());
                let bi = t.input(beta0.clone());
                let yo = t.layer_norm_rows(xi, gi, bi, 1e-5);
                let l = t.sum_all(yo);
                t.scalar(l)
            },
            &gamma0,
            1e-6,
        );
        assert!(relative_error(&grads.wrt(&tape, gm), &fd_gamma) < 1e-7);
        assert!(relative_error(&grads.wrt(&tape, bt), &Array2::from_elem((1, 6), 4.0)) < 1e-12);
    }

    #[test]
    fn grad_slicing_and_concat() {
        check(
            |t, x| {
                let a = t.slice_rows(x, 0, 2);
                let b = t.slice_rows(x, 2, 4);
                let m = t.mul(a, b);
                let c1 = t.slice_cols(m, 0, 2);
                let c2 = t.slice_cols(m, 2, 3);
                let cat = t.concat_cols(&[c2, c1]);
                t.concat_rows(&[cat, cat])
            },
            rand_mat(4, 3, 17),
        );
    }

    #[test]
    fn grad_broadcast_ops() {
        let row = rand_mat(1, 4, 18);
        let col = rand_mat(3, 1, 19);
        check(
            move |t, x| {
                let r = t.constant(row.clone());
                let c = t.constant(col.clone());
                let a = t.add_row(x, r);
                let b = t.mul_row(a, r);
                t.mul_col(b, c)
            },
            rand_mat(3, 4, 20),
        );
    }

    #[test]
    fn grad_broadcast_rhs() {
        // gradients into the broadcast (row / col / scalar) operand
        let x0 = rand_mat(3, 4, 21);
        let row0 = rand_mat(1, 4, 22);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let row = tape.input(row0.clone());
        let y = tape.mul_row(x, row);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let fd = finite_difference(
            |rv| {
                let mut t = Tape::new();
                let xi = t.constant(x0.clone());
                let ri = t.input(rv.clone());
                let yo = t.mul_row(xi, ri);
                let l = t.sum_all(yo);
                t.scalar(l)
            },
            &row0,
            1e-6,
        );
        assert!(relative_error(&grads.wrt(&tape, row), &fd) < 1e-8);
    }

    #[test]
    fn grad_scalar_var_ops() {
        let sc0 = Array2::from_elem((1, 1), 1.7);
        let x0 = rand_mat(2, 3, 23);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let sc = tape.input(sc0.clone());
        let m = tape.mul_scalar_var(x, sc);
        let d = tape.div_scalar_var(m, sc);
        let q = tape.square(d);
        let ms = tape.mul_scalar_var(q, sc);
        let loss = tape.sum_all(ms);
        let grads = tape.backward(loss);
        let fd_sc = finite_difference(
            |sv| {
                let mut t = Tape::new();
                let xi = t.input(x0.clone());
                let si = t.input(sv.clone());
                let mm = t.mul_scalar_var(xi, si);
                let dd = t.div_scalar_var(mm, si);
                let qq = t.square(dd);
                let mss = t.mul_scalar_var(qq, si);
                let l = t.sum_all(mss);
                t.scalar(l)
            },
            &sc0,
            1e-6,
        );
        assert!(relative_error(&grads.wrt(&tape, sc), &fd_sc) < 1e-7);
    }

    #[test]
    fn grad_reductions() {
        check(
            |t, x| {
                let sc = t.sum_cols(x);
                let sr = t.sum_rows(x);
                let outer = t.matmul(sc, sr);
                let m = t.mean_all(outer);
                let s = t.sum_all(x);
                t.add(m, s)
            },
            rand_mat(3, 4, 24),
        );
    }

    #[test]
    fn grad_transpose() {
        check(
            |t, x| {
                let xt = t.transpose(x);
                t.matmul(x, xt)
            },
            rand_mat(3, 4, 25),
        );
    }

    #[test]
    fn grad_extract_patches() {
        check(
            |t, x| {
                let p = t.extract_patches(x, 4, 2, 3);
                t.square(p)
            },
            rand_mat(16, 3, 26),
        );
    }

    #[test]
    fn extract_patches_layout() {
        // 4x4 image, 2 channels, 2x2 patches: spot-check the index mapping.
        let img = Array2::from_shape_fn((16, 2), |(i, c)| (i * 2 + c) as f64);
        let mut tape = Tape::new();
        let x = tape.input(img);
        let p = tape.extract_patches(x, 4, 2, 2);
        let pv = tape.value(p);
        assert_eq!(pv.dim(), (4, 8));
        // patch 0 covers pixels (0,0),(0,1),(1,0),(1,1) -> flat 0,1,4,5
        assert_eq!(pv.row(0).to_vec(), vec![0., 1., 2., 3., 8., 9., 10., 11.]);
        // patch 3 covers pixels (2,2),(2,3),(3,2),(3,3) -> flat 10,11,14,15
        assert_eq!(
            pv.row(3).to_vec(),
            vec![20., 21., 22., 23., 28., 29., 30., 31.]
        );
    }

    #[test]
    fn ste_value_is_hard_but_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.input(array![[0.2, 0.7], [0.5, 0.9]]);
        let h = tape.ste_threshold(x);
        assert_eq!(tape.value(h), &array![[0.0, 1.0], [0.0, 1.0]]);
        let loss = tape.sum_all(h);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(&tape, x), Array2::from_elem((2, 2), 1.0));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // f(x) = sum(x*x + x) -> df/dx = 2x + 1
        let x0 = array![[1.5, -2.0]];
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let sq = tape.mul(x, x);
        let tot = tape.add(sq, x);
        let loss = tape.sum_all(tot);
        let grads = tape.backward(loss);
        let expect = x0.mapv(|v| 2.0 * v + 1.0);
        assert!(relative_error(&grads.wrt(&tape, x), &expect) < 1e-12);
    }

    #[test]
    fn backward_counter_increments() {
        let before = backward_call_count();
        let mut tape = Tape::new();
        let x = tape.input(array![[1.0]]);
        let loss = tape.sum_all(x);
        let _ = tape.backward(loss);
        assert!(backward_call_count() > before);
    }
}
