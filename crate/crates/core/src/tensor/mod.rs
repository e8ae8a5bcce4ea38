//! Minimal dense-matrix reverse-mode autodiff engine.
//!
//! A [`Tape`] records a define-by-run graph of 2-D tensors. Nodes never
//! mutate their inputs; [`Tape::backward`] walks the recording in reverse
//! insertion order (which is a reverse topological order by construction) and
//! accumulates exact gradients. Execution is deterministic: the only
//! parallelism is across independent output rows of large matmuls, with each
//! element written by exactly one thread in a fixed inner-loop order.
//!
//! The op set is exactly what the profile-predicting models need, plus fused
//! loss heads and one domain-specific node ([`Tape::beam_rsrp_db`]) whose
//! backward pass uses the analytic gradients of the physics head.

pub mod checkpoint;
pub mod optim;
pub mod test_support;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use optim::{adam_step, onecycle_lr, AdamParams, AdamState};

use std::cell::RefCell;

use rayon::prelude::*;
use thiserror::Error;

use crate::array::{ArrayConfig, BeamSpec};
use crate::channel::{Mcpp, ScpEntry};
use crate::geom::Vec3;
use crate::num::{real, Real};

/// Row-major dense matrix of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape {rows}x{cols} vs {} values", data.len());
        Matrix { rows, cols, data }
    }

    pub fn scalar(v: R) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    pub fn row(values: &[R]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[R]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut R {
        &mut self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Gaussian entries with the given std, drawn from a keyed stream.
    pub fn randn(rows: usize, cols: usize, std: f64, stream: &mut crate::num::Stream) -> Self {
        let data = (0..rows * cols)
            .map(|_| real::<R>(stream.next_normal() * std))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn map<F: Fn(R) -> R>(&self, f: F) -> Matrix<R> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("{op}: invalid range {lo}..{hi} for size {size}")]
    BadRange {
        op: &'static str,
        lo: usize,
        hi: usize,
        size: usize,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: (usize, usize),
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Context of the fused physics node: the panel, the beams it evaluates, and
/// layout constants.
struct BeamRsrpCtx<R: Real> {
    cfg: ArrayConfig<R>,
    beams: Vec<BeamSpec<R>>,
}

enum Op<R: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleConst(Var, R),
    AddConst(Var, R),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    LayerNormRows(Var, R),
    NormalizeRows(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SmoothL1 {
        pred: Var,
        target: Matrix<R>,
        beta: R,
    },
    BceLogits {
        logits: Var,
        targets: Matrix<R>,
    },
    MseAgainst {
        pred: Var,
        reference: Matrix<R>,
    },
    /// Inputs: directions (L×3), powers (L×1), gates (L×1).
    /// Output: K×1 gated mean RSRP in dB, one row per beam.
    BeamRsrpDb {
        dirs: Var,
        powers: Var,
        gates: Var,
        ctx: Box<BeamRsrpCtx<R>>,
    },
}

struct Node<R: Real> {
    op: Op<R>,
    value: Matrix<R>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<R> {
    buffers: Vec<Option<Matrix<R>>>,
}

impl<R: Real> Grads<R> {
    /// Gradient of the loss with respect to `v` (zeros if unused).
    pub fn get(&self, v: Var, tape: &Tape<R>) -> Matrix<R> {
        match &self.buffers[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Recording tape; all operations are methods that append one node.
pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

type TResult<T> = Result<T, TensorError>;

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<R>, value: Matrix<R>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Insert an input/parameter node.
    pub fn leaf(&self, value: Matrix<R>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        nodes[v.0].value.shape()
    }

    /// Copy of a node's forward value.
    pub fn value(&self, v: Var) -> Matrix<R> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn with_value<T>(&self, v: Var, f: impl FnOnce(&Matrix<R>) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ── forward ops ──────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ma, mb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ma.cols != mb.rows {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    a: ma.shape(),
                    b: mb.shape(),
                });
            }
            matmul_values(ma, mb)
        };
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn zip_elementwise(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
    ) -> TResult<Matrix<R>> {
        let nodes = self.nodes.borrow();
        let (ma, mb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ma.shape() != mb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                a: ma.shape(),
                b: mb.shape(),
            });
        }
        Ok(Matrix {
            rows: ma.rows,
            cols: ma.cols,
            data: ma
                .data
                .iter()
                .zip(&mb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn add(&self, a: Var, b: Var) -> TResult<Var> {
        let v = self.zip_elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&self, a: Var, b: Var) -> TResult<Var> {
        let v = self.zip_elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&self, a: Var, b: Var) -> TResult<Var> {
        let v = self.zip_elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Broadcast-add a 1×C row vector to every row of an R×C matrix.
    pub fn add_row(&self, a: Var, row: Var) -> TResult<Var> {
        let v = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a, row), v))
    }

    /// Broadcast-multiply every row of an R×C matrix by a 1×C row vector.
    pub fn mul_row(&self, a: Var, row: Var) -> TResult<Var> {
        let v = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a, row), v))
    }

    fn row_broadcast(
        &self,
        op_name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(R, R) -> R,
    ) -> TResult<Matrix<R>> {
        let nodes = self.nodes.borrow();
        let (ma, mr) = (&nodes[a.0].value, &nodes[row.0].value);
        if mr.rows != 1 || mr.cols != ma.cols {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                a: ma.shape(),
                b: mr.shape(),
            });
        }
        let mut out = ma.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                *out.at_mut(r, c) = f(ma.at(r, c), mr.data[c]);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, a: Var, k: R) -> Var {
        let v = self.with_value(a, |m| m.map(|x| x * k));
        self.push(Op::ScaleConst(a, k), v)
    }

    pub fn add_const(&self, a: Var, k: R) -> Var {
        let v = self.with_value(a, |m| m.map(|x| x + k));
        self.push(Op::AddConst(a, k), v)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| {
            let mut out = Matrix::zeros(m.cols, m.rows);
            for r in 0..m.rows {
                for c in 0..m.cols {
                    *out.at_mut(c, r) = m.at(r, c);
                }
            }
            out
        });
        self.push(Op::Transpose(a), v)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut rows = 0;
            for &p in parts {
                let m = &nodes[p.0].value;
                if m.cols != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        a: (rows, cols),
                        b: m.shape(),
                    });
                }
                rows += m.rows;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                data.extend_from_slice(&nodes[p.0].value.data);
            }
            Matrix::from_vec(rows, cols, data)
        };
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let mut cols = 0;
            for &p in parts {
                let m = &nodes[p.0].value;
                if m.rows != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        a: (rows, cols),
                        b: m.shape(),
                    });
                }
                cols += m.cols;
            }
            let mut out = Matrix::zeros(rows, cols);
            let mut offset = 0;
            for &p in parts {
                let m = &nodes[p.0].value;
                for r in 0..rows {
                    for c in 0..m.cols {
                        *out.at_mut(r, offset + c) = m.at(r, c);
                    }
                }
                offset += m.cols;
            }
            out
        };
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn slice_rows(&self, a: Var, lo: usize, hi: usize) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.0].value;
            if lo >= hi || hi > m.rows {
                return Err(TensorError::BadRange {
                    op: "slice_rows",
                    lo,
                    hi,
                    size: m.rows,
                });
            }
            Matrix::from_vec(hi - lo, m.cols, m.data[lo * m.cols..hi * m.cols].to_vec())
        };
        Ok(self.push(Op::SliceRows(a, lo, hi), value))
    }

    pub fn slice_cols(&self, a: Var, lo: usize, hi: usize) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.0].value;
            if lo >= hi || hi > m.cols {
                return Err(TensorError::BadRange {
                    op: "slice_cols",
                    lo,
                    hi,
                    size: m.cols,
                });
            }
            let mut out = Matrix::zeros(m.rows, hi - lo);
            for r in 0..m.rows {
                for c in lo..hi {
                    *out.at_mut(r, c - lo) = m.at(r, c);
                }
            }
            out
        };
        Ok(self.push(Op::SliceCols(a, lo, hi), value))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| {
            let mut out = m.clone();
            for r in 0..m.rows {
                let row = &mut out.data[r * m.cols..(r + 1) * m.cols];
                let max = row.iter().copied().fold(R::neg_infinity(), R::max);
                let mut sum = R::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            out
        });
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Row-wise layer normalization (no affine; compose with mul_row/add_row).
    pub fn layer_norm_rows(&self, a: Var, eps: R) -> Var {
        let v = self.with_value(a, |m| layer_norm_values(m, eps));
        self.push(Op::LayerNormRows(a, eps), v)
    }

    /// Row-wise L2 normalization to unit vectors.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| {
            let mut out = m.clone();
            for r in 0..m.rows {
                let row = &mut out.data[r * m.cols..(r + 1) * m.cols];
                let norm = row
                    .iter()
                    .fold(R::zero(), |acc, &x| acc + x * x)
                    .sqrt()
                    .max(real(1e-30));
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
            out
        });
        self.push(Op::NormalizeRows(a), v)
    }

    pub fn gelu(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| m.map(gelu_scalar));
        self.push(Op::Gelu(a), v)
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| m.map(|x| x.max(R::zero())));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| m.map(sigmoid_scalar));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| m.map(|x| x.exp()));
        self.push(Op::Exp(a), v)
    }

    /// Natural logarithm; caller guarantees positive inputs.
    pub fn log(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| m.map(|x| x.ln()));
        self.push(Op::Log(a), v)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| {
            Matrix::scalar(m.data.iter().fold(R::zero(), |acc, &x| acc + x))
        });
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let v = self.with_value(a, |m| {
            let n = real::<R>(m.len() as f64);
            Matrix::scalar(m.data.iter().fold(R::zero(), |acc, &x| acc + x) / n)
        });
        self.push(Op::MeanAll(a), v)
    }

    /// Sum along an axis: 0 collapses rows (result 1×C), 1 collapses columns
    /// (result R×1).
    pub fn sum_axis(&self, a: Var, axis: usize) -> TResult<Var> {
        let v = self.axis_reduce("sum_axis", a, axis, false)?;
        Ok(self.push(Op::SumAxis(a, axis), v))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> TResult<Var> {
        let v = self.axis_reduce("mean_axis", a, axis, true)?;
        Ok(self.push(Op::MeanAxis(a, axis), v))
    }

    fn axis_reduce(
        &self,
        op_name: &'static str,
        a: Var,
        axis: usize,
        mean: bool,
    ) -> TResult<Matrix<R>> {
        if axis > 1 {
            return Err(TensorError::BadShape {
                op: op_name,
                expected: "axis 0 or 1".into(),
                got: (axis, 0),
            });
        }
        let nodes = self.nodes.borrow();
        let m = &nodes[a.0].value;
        Ok(if axis == 0 {
            let mut out = Matrix::zeros(1, m.cols);
            for r in 0..m.rows {
                for c in 0..m.cols {
                    out.data[c] += m.at(r, c);
                }
            }
            if mean {
                let n = real::<R>(m.rows as f64);
                for x in &mut out.data {
                    *x /= n;
                }
            }
            out
        } else {
            let mut out = Matrix::zeros(m.rows, 1);
            for r in 0..m.rows {
                for c in 0..m.cols {
                    out.data[r] += m.at(r, c);
                }
            }
            if mean {
                let n = real::<R>(m.cols as f64);
                for x in &mut out.data {
                    *x /= n;
                }
            }
            out
        })
    }

    /// Mean Smooth-L1 loss of `pred` against a fixed target (scalar output).
    pub fn smooth_l1_loss(&self, pred: Var, target: &Matrix<R>, beta: R) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            if p.shape() != target.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "smooth_l1_loss",
                    a: p.shape(),
                    b: target.shape(),
                });
            }
            let half = real::<R>(0.5);
            let mut total = R::zero();
            for (&x, &t) in p.data.iter().zip(&target.data) {
                let e = x - t;
                total += if e.abs() < beta {
                    half * e * e / beta
                } else {
                    e.abs() - half * beta
                };
            }
            Matrix::scalar(total / real(p.len() as f64))
        };
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                beta,
            },
            value,
        ))
    }

    /// Mean binary cross-entropy over logits against fixed 0/1 targets,
    /// evaluated in the stable log-sum-exp form.
    pub fn bce_with_logits_loss(&self, logits: Var, targets: &Matrix<R>) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            if z.shape() != targets.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_with_logits_loss",
                    a: z.shape(),
                    b: targets.shape(),
                });
            }
            let mut total = R::zero();
            for (&x, &t) in z.data.iter().zip(&targets.data) {
                // max(z,0) - z·t + ln(1 + e^{-|z|})
                total += x.max(R::zero()) - x * t + (R::one() + (-x.abs()).exp()).ln();
            }
            Matrix::scalar(total / real(z.len() as f64))
        };
        Ok(self.push(
            Op::BceLogits {
                logits,
                targets: targets.clone(),
            },
            value,
        ))
    }

    /// Mean squared error of `pred` against a fixed reference (scalar output).
    pub fn mse_loss(&self, pred: Var, reference: &Matrix<R>) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            if p.shape() != reference.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "mse_loss",
                    a: p.shape(),
                    b: reference.shape(),
                });
            }
            let mut total = R::zero();
            for (&x, &t) in p.data.iter().zip(&reference.data) {
                let e = x - t;
                total += e * e;
            }
            Matrix::scalar(total / real(p.len() as f64))
        };
        Ok(self.push(
            Op::MseAgainst {
                pred,
                reference: reference.clone(),
            },
            value,
        ))
    }

    /// Fixed differentiable physics head: gated mean beam RSRP in dB.
    ///
    /// `dirs` is L×3 (unit departure directions), `powers` and `gates` are
    /// L×1; the output is K×1 with row k = 10·log10(Σ_l g_l·γ_l(beam_k) + ε).
    /// Backward uses the closed-form gradients of the mean.
    pub fn beam_rsrp_db(
        &self,
        dirs: Var,
        powers: Var,
        gates: Var,
        cfg: &ArrayConfig<R>,
        beams: &[BeamSpec<R>],
    ) -> TResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let d = &nodes[dirs.0].value;
            let p = &nodes[powers.0].value;
            let g = &nodes[gates.0].value;
            if d.cols != 3 {
                return Err(TensorError::BadShape {
                    op: "beam_rsrp_db",
                    expected: "Lx3 directions".into(),
                    got: d.shape(),
                });
            }
            if p.shape() != (d.rows, 1) || g.shape() != (d.rows, 1) {
                return Err(TensorError::ShapeMismatch {
                    op: "beam_rsrp_db",
                    a: p.shape(),
                    b: g.shape(),
                });
            }
            let mcpp = mcpp_from_matrices(d, p);
            let mut out = Matrix::zeros(beams.len(), 1);
            for (k, beam) in beams.iter().enumerate() {
                let mu = crate::whitebox::rsrp_mean_gated(&mcpp, &g.data, cfg, beam);
                out.data[k] = crate::channel::power_to_db(mu);
            }
            out
        };
        Ok(self.push(
            Op::BeamRsrpDb {
                dirs,
                powers,
                gates,
                ctx: Box::new(BeamRsrpCtx {
                    cfg: *cfg,
                    beams: beams.to_vec(),
                }),
            },
            value,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss` node. Returns one gradient
    /// buffer per node; inputs not on the path to the loss stay `None`.
    pub fn backward(&self, loss: Var) -> Grads<R> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.shape(),
            (1, 1),
            "backward starts from a scalar node"
        );
        let mut grads: Vec<Option<Matrix<R>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(R::one()));

        for id in (0..=loss.0).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            self.accumulate_parents(&nodes, id, &grad_out, &mut grads);
            grads[id] = Some(grad_out);
        }
        Grads { buffers: grads }
    }

    fn accumulate_parents(
        &self,
        nodes: &[Node<R>],
        id: usize,
        grad_out: &Matrix<R>,
        grads: &mut [Option<Matrix<R>>],
    ) {
        let add_to = |grads: &mut [Option<Matrix<R>>], v: Var, delta: Matrix<R>| {
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, d) in buf.data.iter_mut().zip(delta.data) {
                        *b += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (&nodes[a.0].value, &nodes[b.0].value);
                let da = matmul_values(grad_out, &transpose_values(mb));
                let db = matmul_values(&transpose_values(ma), grad_out);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, grad_out.clone());
                add_to(grads, *b, grad_out.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, grad_out.clone());
                add_to(grads, *b, grad_out.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (&nodes[a.0].value, &nodes[b.0].value);
                let da = Matrix {
                    rows: ma.rows,
                    cols: ma.cols,
                    data: grad_out
                        .data
                        .iter()
                        .zip(&mb.data)
                        .map(|(&g, &y)| g * y)
                        .collect(),
                };
                let db = Matrix {
                    rows: mb.rows,
                    cols: mb.cols,
                    data: grad_out
                        .data
                        .iter()
                        .zip(&ma.data)
                        .map(|(&g, &x)| g * x)
                        .collect(),
                };
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, grad_out.clone());
                let m = &nodes[a.0].value;
                let mut drow = Matrix::zeros(1, m.cols);
                for r in 0..m.rows {
                    for c in 0..m.cols {
                        drow.data[c] += grad_out.at(r, c);
                    }
                }
                add_to(grads, *row, drow);
            }
            Op::MulRow(a, row) => {
                let m = &nodes[a.0].value;
                let vrow = &nodes[row.0].value;
                let mut da = Matrix::zeros(m.rows, m.cols);
                let mut drow = Matrix::zeros(1, m.cols);
                for r in 0..m.rows {
                    for c in 0..m.cols {
                        *da.at_mut(r, c) = grad_out.at(r, c) * vrow.data[c];
                        drow.data[c] += grad_out.at(r, c) * m.at(r, c);
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *row, drow);
            }
            Op::ScaleConst(a, k) => {
                add_to(grads, *a, grad_out.map(|x| x * *k));
            }
            Op::AddConst(a, _) => {
                add_to(grads, *a, grad_out.clone());
            }
            Op::Transpose(a) => {
                add_to(grads, *a, transpose_values(grad_out));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let m = &nodes[p.0].value;
                    let slice = Matrix::from_vec(
                        m.rows,
                        m.cols,
                        grad_out.data[offset * m.cols..(offset + m.rows) * m.cols].to_vec(),
                    );
                    add_to(grads, p, slice);
                    offset += m.rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let m = &nodes[p.0].value;
                    let mut slice = Matrix::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        for c in 0..m.cols {
                            *slice.at_mut(r, c) = grad_out.at(r, offset + c);
                        }
                    }
                    add_to(grads, p, slice);
                    offset += m.cols;
                }
            }
            Op::SliceRows(a, lo, _hi) => {
                let m = &nodes[a.0].value;
                let mut da = Matrix::zeros(m.rows, m.cols);
                for r in 0..grad_out.rows {
                    for c in 0..m.cols {
                        *da.at_mut(lo + r, c) = grad_out.at(r, c);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SliceCols(a, lo, _hi) => {
                let m = &nodes[a.0].value;
                let mut da = Matrix::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    for c in 0..grad_out.cols {
                        *da.at_mut(r, lo + c) = grad_out.at(r, c);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &nodes[id].value;
                let mut da = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let mut dot = R::zero();
                    for c in 0..y.cols {
                        dot += grad_out.at(r, c) * y.at(r, c);
                    }
                    for c in 0..y.cols {
                        *da.at_mut(r, c) = y.at(r, c) * (grad_out.at(r, c) - dot);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::LayerNormRows(a, eps) => {
                let x = &nodes[a.0].value;
                let y = &nodes[id].value;
                let n = real::<R>(x.cols as f64);
                let mut da = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let mut mean = R::zero();
                    for c in 0..x.cols {
                        mean += x.at(r, c);
                    }
                    mean /= n;
                    let mut var = R::zero();
                    for c in 0..x.cols {
                        let d = x.at(r, c) - mean;
                        var += d * d;
                    }
                    var /= n;
                    let inv_std = (var + *eps).sqrt().recip();
                    let mut g_mean = R::zero();
                    let mut gy_mean = R::zero();
                    for c in 0..x.cols {
                        g_mean += grad_out.at(r, c);
                        gy_mean += grad_out.at(r, c) * y.at(r, c);
                    }
                    g_mean /= n;
                    gy_mean /= n;
                    for c in 0..x.cols {
                        *da.at_mut(r, c) =
                            inv_std * (grad_out.at(r, c) - g_mean - y.at(r, c) * gy_mean);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let x = &nodes[a.0].value;
                let y = &nodes[id].value;
                let mut da = Matrix::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let norm = (0..x.cols)
                        .fold(R::zero(), |acc, c| acc + x.at(r, c) * x.at(r, c))
                        .sqrt()
                        .max(real(1e-30));
                    let mut dot = R::zero();
                    for c in 0..x.cols {
                        dot += grad_out.at(r, c) * y.at(r, c);
                    }
                    for c in 0..x.cols {
                        *da.at_mut(r, c) = (grad_out.at(r, c) - y.at(r, c) * dot) / norm;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                let da = Matrix {
                    rows: x.rows,
                    cols: x.cols,
                    data: x
                        .data
                        .iter()
                        .zip(&grad_out.data)
                        .map(|(&xi, &g)| g * gelu_deriv(xi))
                        .collect(),
                };
                add_to(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                let da = Matrix {
                    rows: x.rows,
                    cols: x.cols,
                    data: x
                        .data
                        .iter()
                        .zip(&grad_out.data)
                        .map(|(&xi, &g)| if xi > R::zero() { g } else { R::zero() })
                        .collect(),
                };
                add_to(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[id].value;
                let da = Matrix {
                    rows: y.rows,
                    cols: y.cols,
                    data: y
                        .data
                        .iter()
                        .zip(&grad_out.data)
                        .map(|(&s, &g)| g * s * (R::one() - s))
                        .collect(),
                };
                add_to(grads, *a, da);
            }
            Op::Exp(a) => {
                let y = &nodes[id].value;
                let da = Matrix {
                    rows: y.rows,
                    cols: y.cols,
                    data: y
                        .data
                        .iter()
                        .zip(&grad_out.data)
                        .map(|(&e, &g)| g * e)
                        .collect(),
                };
                add_to(grads, *a, da);
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                let da = Matrix {
                    rows: x.rows,
                    cols: x.cols,
                    data: x
                        .data
                        .iter()
                        .zip(&grad_out.data)
                        .map(|(&xi, &g)| g / xi)
                        .collect(),
                };
                add_to(grads, *a, da);
            }
            Op::SumAll(a) => {
                let m = &nodes[a.0].value;
                let g = grad_out.data[0];
                add_to(
                    grads,
                    *a,
                    Matrix::from_vec(m.rows, m.cols, vec![g; m.len()]),
                );
            }
            Op::MeanAll(a) => {
                let m = &nodes[a.0].value;
                let g = grad_out.data[0] / real(m.len() as f64);
                add_to(
                    grads,
                    *a,
                    Matrix::from_vec(m.rows, m.cols, vec![g; m.len()]),
                );
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let m = &nodes[a.0].value;
                let is_mean = matches!(nodes[id].op, Op::MeanAxis(..));
                let denom = if is_mean {
                    real::<R>(if *axis == 0 { m.rows } else { m.cols } as f64)
                } else {
                    R::one()
                };
                let mut da = Matrix::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    for c in 0..m.cols {
                        let g = if *axis == 0 {
                            grad_out.data[c]
                        } else {
                            grad_out.data[r]
                        };
                        *da.at_mut(r, c) = g / denom;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let p = &nodes[pred.0].value;
                let g = grad_out.data[0] / real(p.len() as f64);
                let da = Matrix {
                    rows: p.rows,
                    cols: p.cols,
                    data: p
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(&x, &t)| {
                            let e = x - t;
                            g * if e.abs() < *beta {
                                e / *beta
                            } else {
                                e.signum()
                            }
                        })
                        .collect(),
                };
                add_to(grads, *pred, da);
            }
            Op::BceLogits { logits, targets } => {
                let z = &nodes[logits.0].value;
                let g = grad_out.data[0] / real(z.len() as f64);
                let da = Matrix {
                    rows: z.rows,
                    cols: z.cols,
                    data: z
                        .data
                        .iter()
                        .zip(&targets.data)
                        .map(|(&x, &t)| g * (sigmoid_scalar(x) - t))
                        .collect(),
                };
                add_to(grads, *logits, da);
            }
            Op::MseAgainst { pred, reference } => {
                let p = &nodes[pred.0].value;
                let g = grad_out.data[0] / real(p.len() as f64);
                let two = real::<R>(2.0);
                let da = Matrix {
                    rows: p.rows,
                    cols: p.cols,
                    data: p
                        .data
                        .iter()
                        .zip(&reference.data)
                        .map(|(&x, &t)| g * two * (x - t))
                        .collect(),
                };
                add_to(grads, *pred, da);
            }
            Op::BeamRsrpDb {
                dirs,
                powers,
                gates,
                ctx,
            } => {
                let d = &nodes[dirs.0].value;
                let p = &nodes[powers.0].value;
                let g = &nodes[gates.0].value;
                let mcpp = mcpp_from_matrices(d, p);
                let mut dd = Matrix::zeros(d.rows, 3);
                let mut dp = Matrix::zeros(d.rows, 1);
                let mut dg = Matrix::zeros(d.rows, 1);
                let ten_over_ln10 = real::<R>(10.0) / R::LN_10();
                for (k, beam) in ctx.beams.iter().enumerate() {
                    let (mu, path_grads) =
                        crate::whitebox::rsrp_mean_gated_grad(&mcpp, &g.data, &ctx.cfg, beam);
                    // d(dB)/dμ = 10 / (ln10 · (μ + ε))
                    let chain =
                        grad_out.data[k] * ten_over_ln10 / (mu + real(crate::channel::DB_FLOOR_EPS));
                    for (l, pg) in path_grads.iter().enumerate() {
                        dp.data[l] += chain * pg.d_p;
                        dg.data[l] += chain * pg.d_gate;
                        *dd.at_mut(l, 0) += chain * pg.d_u_tx.x;
                        *dd.at_mut(l, 1) += chain * pg.d_u_tx.y;
                        *dd.at_mut(l, 2) += chain * pg.d_u_tx.z;
                    }
                }
                add_to(grads, *dirs, dd);
                add_to(grads, *powers, dp);
                add_to(grads, *gates, dg);
            }
        }
    }
}

fn mcpp_from_matrices<R: Real>(dirs: &Matrix<R>, powers: &Matrix<R>) -> Mcpp<R> {
    let paths = (0..dirs.rows)
        .map(|l| {
            ScpEntry::new(
                Vec3::new(dirs.at(l, 0), dirs.at(l, 1), dirs.at(l, 2)),
                Vec3::new(R::one(), R::zero(), R::zero()),
                R::zero(),
                powers.data[l],
            )
        })
        .collect();
    Mcpp::new(paths)
}

fn layer_norm_values<R: Real>(m: &Matrix<R>, eps: R) -> Matrix<R> {
    let mut out = m.clone();
    let n = real::<R>(m.cols as f64);
    for r in 0..m.rows {
        let row = &mut out.data[r * m.cols..(r + 1) * m.cols];
        let mean = row.iter().fold(R::zero(), |a, &x| a + x) / n;
        let var = row.iter().fold(R::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
        let inv_std = (var + eps).sqrt().recip();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv_std;
        }
    }
    out
}

fn gelu_scalar<R: Real>(x: R) -> R {
    // tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))
    let c = real::<R>(0.797_884_560_802_865_4);
    let k = real::<R>(0.044715);
    let u = c * (x + k * x * x * x);
    real::<R>(0.5) * x * (R::one() + u.tanh())
}

fn gelu_deriv<R: Real>(x: R) -> R {
    let c = real::<R>(0.797_884_560_802_865_4);
    let k = real::<R>(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = R::one() - t * t;
    let du = c * (R::one() + real::<R>(3.0) * k * x * x);
    real::<R>(0.5) * (R::one() + t) + real::<R>(0.5) * x * sech2 * du
}

fn sigmoid_scalar<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Rows of the output above this element count are computed in parallel.
const PAR_THRESHOLD: usize = 1 << 15;

fn matmul_values<R: Real>(a: &Matrix<R>, b: &Matrix<R>) -> Matrix<R> {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    let work = m * k * n;
    let body = |r: usize, row_out: &mut [R]| {
        for kk in 0..k {
            let av = a.data[r * k + kk];
            if av == R::zero() {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, row_out)| body(r, row_out));
    } else {
        for (r, row_out) in out.data.chunks_mut(n).enumerate() {
            body(r, row_out);
        }
    }
    out
}

fn transpose_values<R: Real>(m: &Matrix<R>) -> Matrix<R> {
    let mut out = Matrix::zeros(m.cols, m.rows);
    for r in 0..m.rows {
        for c in 0..m.cols {
            *out.at_mut(c, r) = m.at(r, c);
        }
    }
    out
}
