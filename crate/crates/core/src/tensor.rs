//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles over shared storage. Every op rebuilds the
//! gradient tape on the fly: outputs remember their parents and a backward
//! closure, and [`Tensor::backward`] walks the graph in reverse topological
//! order. Kernels use fixed sequential reduction order so repeated runs are
//! bit-identical.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::kernels;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("label {label} out of range for vocab {vocab} at position {pos}")]
    LabelOutOfRange { label: u32, vocab: usize, pos: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    EmbedOutOfRange { id: u32, rows: usize },
    #[error("slice {start}..{end} out of bounds for extent {extent}")]
    SliceOutOfBounds {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already called on this tensor; rebuild the graph before calling again")]
    BackwardTwice,
    #[error("label list length {labels} does not match {rows} logit rows")]
    LabelCountMismatch { labels: usize, rows: usize },
    #[error("softmax row {row} has no allowed positions")]
    EmptySoftmaxRow { row: usize },
}

type BackwardFn = Box<dyn Fn(&[f32])>;

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_done: bool,
    id: u64,
}

/// Handle to a shared tensor node. Cloning copies the handle, not the data.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            d.id, d.shape, d.requires_grad
        )
    }
}

/// Boolean attention mask over a score matrix: `allowed[q*cols + k]` marks
/// which key positions each query row may attend to.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    /// Causal square mask: row q attends to keys 0..=q.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = true;
            }
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    /// Causal mask that additionally hides padding keys at positions
    /// `valid_len..n`. Each row keeps itself so no row is empty.
    pub fn causal_padded(n: usize, valid_len: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = k < valid_len || k == q;
            }
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    /// Fully bidirectional mask (encoder self-attention).
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad,
                requires_grad,
                parents: Vec::new(),
                backward: None,
                backward_done: false,
                id: fresh_id(),
            })),
        }
    }

    /// Leaf tensor without gradient tracking.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self::from_parts(shape.to_vec(), data, false)
    }

    /// Leaf tensor that participates in backward (a trainable buffer).
    pub fn with_grad(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::from_parts(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(&[1], vec![v])
    }

    /// Output node of an op. The backward closure is only built when some
    /// parent is tracked, so untracked (frozen-encoder) paths stay cheap.
    fn from_op<F, B>(shape: Vec<usize>, data: Vec<f32>, parents: &[&Tensor], make_backward: F) -> Self
    where
        F: FnOnce() -> B,
        B: Fn(&[f32]) + 'static,
    {
        let track = parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::from_parts(shape, data, false);
        }
        let t = Self::from_parts(shape, data, true);
        {
            let mut d = t.inner.borrow_mut();
            d.parents = parents.iter().map(|p| (*p).clone()).collect();
            d.backward = Some(Box::new(make_backward()));
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copy of the stored values.
    pub fn data(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Copy of the gradient buffer, if this tensor tracks one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    /// Scalar value; panics on non-scalars (test/diagnostic convenience).
    pub fn item(&self) -> f32 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on shape {:?}", d.shape);
        d.data[0]
    }

    /// Overwrite stored values in place. Shape is fixed.
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), values.len());
        d.data.copy_from_slice(values);
    }

    /// Apply an in-place update to the stored values (optimizer path).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        let mut d = self.inner.borrow_mut();
        f(&mut d.data);
    }

    pub fn zero_grad(&self) {
        let mut d = self.inner.borrow_mut();
        if let Some(g) = d.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        d.backward_done = false;
    }

    /// New leaf sharing this tensor's values but cut off from the tape.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::from_parts(d.shape.clone(), d.data.clone(), false)
    }

    fn accum_grad(&self, contrib: &[f32]) {
        let mut d = self.inner.borrow_mut();
        if let Some(g) = d.grad.as_mut() {
            debug_assert_eq!(g.len(), contrib.len());
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        let d = self.inner.borrow();
        match d.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: d.shape.clone(),
            }),
        }
    }

    // ---------------------------------------------------------------
    // Elementwise and broadcast ops
    // ---------------------------------------------------------------

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a,
                right: b,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_shape(other, "add")?;
        let (a, b) = (self.data(), other.data());
        let out: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (p0, p1) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape(), out, &[self, other], move || {
            move |dy: &[f32]| {
                p0.accum_grad(dy);
                p1.accum_grad(dy);
            }
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_shape(other, "sub")?;
        let (a, b) = (self.data(), other.data());
        let out: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (p0, p1) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape(), out, &[self, other], move || {
            move |dy: &[f32]| {
                p0.accum_grad(dy);
                let neg: Vec<f32> = dy.iter().map(|v| -v).collect();
                p1.accum_grad(&neg);
            }
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.check_same_shape(other, "mul")?;
        let (a, b) = (self.data(), other.data());
        let out: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (p0, p1) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape(), out, &[self, other], move || {
            move |dy: &[f32]| {
                let da: Vec<f32> = dy.iter().zip(&b).map(|(d, y)| d * y).collect();
                let db: Vec<f32> = dy.iter().zip(&a).map(|(d, x)| d * x).collect();
                p0.accum_grad(&da);
                p1.accum_grad(&db);
            }
        }))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::from_op(self.shape(), out, &[self], move || {
            move |dy: &[f32]| {
                let d: Vec<f32> = dy.iter().map(|v| v * c).collect();
                p.accum_grad(&d);
            }
        })
    }

    /// Add a length-d row vector to every row of an [n x d] matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (n, d) = self.rows_cols("add_row")?;
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let x = self.data();
        let b = bias.data();
        let mut out = x.clone();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += b[j];
            }
        }
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(self.shape(), out, &[self, bias], move || {
            move |dy: &[f32]| {
                px.accum_grad(dy);
                let mut db = vec![0.0f32; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += dy[i * d + j];
                    }
                }
                pb.accum_grad(&db);
            }
        }))
    }

    pub fn sum(&self) -> Tensor {
        let total: f32 = self.data().iter().sum();
        let n = self.numel();
        let shape = self.shape();
        let p = self.clone();
        Tensor::from_op(vec![1], vec![total], &[self], move || {
            let _ = &shape;
            move |dy: &[f32]| {
                p.accum_grad(&vec![dy[0]; n]);
            }
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f32 = self.data().iter().sum();
        let p = self.clone();
        Tensor::from_op(vec![1], vec![total / n as f32], &[self], move || {
            move |dy: &[f32]| {
                p.accum_grad(&vec![dy[0] / n as f32; n]);
            }
        })
    }

    // ---------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let a = self.data();
        let b = other.data();
        let out = kernels::matmul(&a, &b, m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![m, n], out, &[self, other], move || {
            move |dy: &[f32]| {
                // dA = dY . B^T, dB = A^T . dY
                let da = kernels::matmul_nt(dy, &b, m, n, k);
                let db = kernels::matmul_tn(&a, dy, m, k, n);
                pa.accum_grad(&da);
                pb.accum_grad(&db);
            }
        }))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.rows_cols("transpose")?;
        let x = self.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let p = self.clone();
        Ok(Tensor::from_op(vec![n, m], out, &[self], move || {
            move |dy: &[f32]| {
                let mut dx = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = dy[j * m + i];
                    }
                }
                p.accum_grad(&dx);
            }
        }))
    }

    /// Take rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let (m, d) = self.rows_cols("slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::SliceOutOfBounds {
                start,
                end,
                extent: m,
            });
        }
        let x = self.data();
        let out = x[start * d..end * d].to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![end - start, d],
            out,
            &[self],
            move || {
                move |dy: &[f32]| {
                    let mut dx = vec![0.0f32; m * d];
                    dx[start * d..end * d].copy_from_slice(dy);
                    p.accum_grad(&dx);
                }
            },
        ))
    }

    /// Take columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let (m, d) = self.rows_cols("slice_cols")?;
        if start > end || end > d {
            return Err(TensorError::SliceOutOfBounds {
                start,
                end,
                extent: d,
            });
        }
        let w = end - start;
        let x = self.data();
        let mut out = vec![0.0f32; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&x[i * d + start..i * d + end]);
        }
        let p = self.clone();
        Ok(Tensor::from_op(vec![m, w], out, &[self], move || {
            move |dy: &[f32]| {
                let mut dx = vec![0.0f32; m * d];
                for i in 0..m {
                    dx[i * d + start..i * d + end].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                p.accum_grad(&dx);
            }
        }))
    }

    // ---------------------------------------------------------------
    // Neural primitives
    // ---------------------------------------------------------------

    /// Tanh-approximation GELU, elementwise.
    pub fn gelu(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f32> = x.iter().map(|&v| kernels::gelu_scalar(v)).collect();
        let p = self.clone();
        Tensor::from_op(self.shape(), out, &[self], move || {
            move |dy: &[f32]| {
                let dx: Vec<f32> = dy
                    .iter()
                    .zip(&x)
                    .map(|(d, &v)| d * kernels::gelu_grad_scalar(v))
                    .collect();
                p.accum_grad(&dx);
            }
        })
    }

    /// Per-row layer normalization with affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
        let (n, d) = self.rows_cols("layer_norm")?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(),
                right: gain.shape(),
            });
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut out = vec![0.0f32; n * d];
        let mut xhat = vec![0.0f32; n * d];
        let mut inv_std = vec![0.0f32; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = g[j] * xh + b[j];
            }
        }
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape(),
            out,
            &[self, gain, bias],
            move || {
                move |dy: &[f32]| {
                    let mut dg = vec![0.0f32; d];
                    let mut db = vec![0.0f32; d];
                    let mut dx = vec![0.0f32; n * d];
                    for i in 0..n {
                        let istd = inv_std[i];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let dyr = &dy[i * d..(i + 1) * d];
                        let mut sum_gdy = 0.0f32;
                        let mut sum_gdy_xh = 0.0f32;
                        for j in 0..d {
                            let gd = g[j] * dyr[j];
                            sum_gdy += gd;
                            sum_gdy_xh += gd * xh[j];
                            dg[j] += dyr[j] * xh[j];
                            db[j] += dyr[j];
                        }
                        let m1 = sum_gdy / d as f32;
                        let m2 = sum_gdy_xh / d as f32;
                        for j in 0..d {
                            dx[i * d + j] = (g[j] * dyr[j] - m1 - xh[j] * m2) * istd;
                        }
                    }
                    px.accum_grad(&dx);
                    pg.accum_grad(&dg);
                    pb.accum_grad(&db);
                }
            },
        ))
    }

    /// Row-wise softmax restricted to mask-allowed positions; masked entries
    /// come out exactly 0.0 and receive no gradient.
    pub fn masked_softmax_rows(&self, mask: &AttnMask) -> Result<Tensor, TensorError> {
        let (n, d) = self.rows_cols("masked_softmax_rows")?;
        if mask.rows != n || mask.cols != d {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                left: vec![n, d],
                right: vec![mask.rows, mask.cols],
            });
        }
        let x = self.data();
        let allowed = mask.allowed.clone();
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            // Count allowed slots rather than testing max: a row poisoned
            // with NaN must flow through as NaN, not masquerade as masked.
            let mut any = false;
            let mut max = f32::NEG_INFINITY;
            for j in 0..d {
                if allowed[i * d + j] {
                    any = true;
                    max = max.max(x[i * d + j]);
                }
            }
            if !any {
                return Err(TensorError::EmptySoftmaxRow { row: i });
            }
            let mut denom = 0.0f32;
            for j in 0..d {
                if allowed[i * d + j] {
                    let e = (x[i * d + j] - max).exp();
                    out[i * d + j] = e;
                    denom += e;
                }
            }
            for j in 0..d {
                if allowed[i * d + j] {
                    out[i * d + j] /= denom;
                }
            }
        }
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::from_op(self.shape(), out, &[self], move || {
            move |dy: &[f32]| {
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    let mut dot = 0.0f32;
                    for j in 0..d {
                        if allowed[i * d + j] {
                            dot += dy[i * d + j] * y[i * d + j];
                        }
                    }
                    for j in 0..d {
                        if allowed[i * d + j] {
                            dx[i * d + j] = y[i * d + j] * (dy[i * d + j] - dot);
                        }
                    }
                }
                p.accum_grad(&dx);
            }
        }))
    }

    /// Mean negative log-softmax over the labeled positions. `None` marks an
    /// ignored position; with no labeled positions the loss is 0.
    pub fn softmax_ce_loss(&self, labels: &[Option<u32>]) -> Result<Tensor, TensorError> {
        let (t, v) = self.rows_cols("softmax_ce_loss")?;
        if labels.len() != t {
            return Err(TensorError::LabelCountMismatch {
                labels: labels.len(),
                rows: t,
            });
        }
        for (pos, l) in labels.iter().enumerate() {
            if let Some(id) = l {
                if *id as usize >= v {
                    return Err(TensorError::LabelOutOfRange {
                        label: *id,
                        vocab: v,
                        pos,
                    });
                }
            }
        }
        let x = self.data();
        let labels: Vec<Option<u32>> = labels.to_vec();
        let n_sup = labels.iter().filter(|l| l.is_some()).count();
        let mut total = 0.0f32;
        if n_sup > 0 {
            for (i, l) in labels.iter().enumerate() {
                if let Some(id) = l {
                    let row = &x[i * v..(i + 1) * v];
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f32>().ln();
                    total += lse - row[*id as usize];
                }
            }
            total /= n_sup as f32;
        }
        let p = self.clone();
        Ok(Tensor::from_op(vec![1], vec![total], &[self], move || {
            move |dy: &[f32]| {
                if n_sup == 0 {
                    return;
                }
                let scale = dy[0] / n_sup as f32;
                let mut dx = vec![0.0f32; t * v];
                for (i, l) in labels.iter().enumerate() {
                    if let Some(id) = l {
                        let row = &x[i * v..(i + 1) * v];
                        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let denom: f32 = row.iter().map(|&z| (z - max).exp()).sum();
                        for j in 0..v {
                            let sm = (row[j] - max).exp() / denom;
                            let onehot = if j == *id as usize { 1.0 } else { 0.0 };
                            dx[i * v + j] = scale * (sm - onehot);
                        }
                    }
                }
                p.accum_grad(&dx);
            }
        }))
    }

    /// Gather rows of this [V x d] table by token id.
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor, TensorError> {
        let (rows, d) = self.rows_cols("embed")?;
        for &id in ids {
            if id as usize >= rows {
                return Err(TensorError::EmbedOutOfRange { id, rows });
            }
        }
        let table = self.data();
        let t = ids.len();
        let mut out = vec![0.0f32; t * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&table[id as usize * d..(id as usize + 1) * d]);
        }
        let ids: Vec<u32> = ids.to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(vec![t, d], out, &[self], move || {
            move |dy: &[f32]| {
                let mut dt = vec![0.0f32; rows * d];
                for (i, &id) in ids.iter().enumerate() {
                    let base = id as usize * d;
                    for j in 0..d {
                        dt[base + j] += dy[i * d + j];
                    }
                }
                p.accum_grad(&dt);
            }
        }))
    }

    // ---------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Errors on non-scalars and on a
    /// second call for the same graph root.
    pub fn backward(&self) -> Result<(), TensorError> {
        {
            let mut d = self.inner.borrow_mut();
            if d.data.len() != 1 {
                return Err(TensorError::NonScalarLoss(d.shape.clone()));
            }
            if d.backward_done {
                return Err(TensorError::BackwardTwice);
            }
            d.backward_done = true;
            if let Some(g) = d.grad.as_mut() {
                g[0] = 1.0;
            }
        }
        // Iterative post-order DFS; reversed, it yields a valid topological
        // order for the backward sweep.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child_idx)) = stack.pop() {
            let parents: Vec<Tensor> = node.inner.borrow().parents.clone();
            if child_idx < parents.len() {
                stack.push((node.clone(), child_idx + 1));
                let child = parents[child_idx].clone();
                let cid = child.id();
                if !visited.contains(&cid) {
                    visited.insert(cid);
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        for node in order.iter().rev() {
            let (grad, has_fn) = {
                let d = node.inner.borrow();
                (d.grad.clone(), d.backward.is_some())
            };
            if !has_fn {
                continue;
            }
            if let Some(g) = grad {
                let d = node.inner.borrow();
                if let Some(f) = d.backward.as_ref() {
                    f(&g);
                }
            }
        }
        Ok(())
    }
}

/// Stack [n_i x d] blocks vertically.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "concat_rows needs at least one part");
    let (_, d) = parts[0].rows_cols("concat_rows")?;
    let mut sizes = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        let (ni, di) = p.rows_cols("concat_rows")?;
        if di != d {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: vec![ni, di],
                right: vec![0, d],
            });
        }
        sizes.push(ni);
        data.extend_from_slice(&p.data());
    }
    let total: usize = sizes.iter().sum();
    let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(Tensor::from_op(vec![total, d], data, parts, move || {
        move |dy: &[f32]| {
            let mut off = 0usize;
            for (h, ni) in handles.iter().zip(&sizes) {
                h.accum_grad(&dy[off * d..(off + ni) * d]);
                off += ni;
            }
        }
    }))
}

/// Stack [n x d_i] blocks horizontally.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "concat_cols needs at least one part");
    let (n, _) = parts[0].rows_cols("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ni, di) = p.rows_cols("concat_cols")?;
        if ni != n {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: vec![ni, di],
                right: vec![n, 0],
            });
        }
        widths.push(di);
    }
    let total: usize = widths.iter().sum();
    let datas: Vec<Vec<f32>> = parts.iter().map(|p| p.data()).collect();
    let mut data = vec![0.0f32; n * total];
    for i in 0..n {
        let mut off = 0usize;
        for (pd, w) in datas.iter().zip(&widths) {
            data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            off += w;
        }
    }
    let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Ok(Tensor::from_op(vec![n, total], data, parts, move || {
        move |dy: &[f32]| {
            let mut off = 0usize;
            for (h, w) in handles.iter().zip(&widths) {
                let mut dp = vec![0.0f32; n * w];
                for i in 0..n {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&dy[i * total + off..i * total + off + w]);
                }
                h.accum_grad(&dp);
                off += w;
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_exact() {
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let left = i2.matmul(&a).unwrap();
        let right = a.matmul(&i2).unwrap();
        assert_eq!(left.data(), vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(right.data(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let a = Tensor::new(&[1, 1], vec![2.0]);
        let b = Tensor::new(&[1, 1], vec![3.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), vec![6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Fixed pseudo-random entries; oracle is an independent naive loop.
        let a_data: Vec<f32> = (0..12).map(|i| ((i * 37 + 11) % 17) as f32 / 7.0 - 1.0).collect();
        let b_data: Vec<f32> = (0..8).map(|i| ((i * 53 + 5) % 23) as f32 / 9.0 - 1.0).collect();
        let a = Tensor::new(&[3, 4], a_data.clone());
        let b = Tensor::new(&[4, 2], b_data.clone());
        let out = a.matmul(&b).unwrap().data();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f64;
                for k in 0..4 {
                    acc += a_data[i * 4 + k] as f64 * b_data[k * 2 + j] as f64;
                }
                assert!((out[i * 2 + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::new(&[1, 3], vec![0.0, 10.0, -10.0]);
        let y = x.gelu().data();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-4);
        assert!(y[2].abs() < 1e-3);
    }

    #[test]
    fn gelu_shape_on_sampled_ranges() {
        // The curve dips to about -0.17 near x = -0.75: increasing on
        // x >= 0, decreasing on the left tail up to x = -1.
        let xs: Vec<f32> = (0..=40).map(|i| i as f32 * 0.25).collect();
        let y = Tensor::new(&[1, xs.len()], xs).gelu().data();
        for w in y.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let xs: Vec<f32> = (-40..=-4).map(|i| i as f32 * 0.25).collect();
        let y = Tensor::new(&[1, xs.len()], xs).gelu().data();
        for w in y.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn gelu_tracks_gaussian_cdf_oracle() {
        // Abramowitz-Stegun 7.1.26 rational erf, |err| < 1.5e-7, far below
        // the tanh approximation's own gap from exact GELU.
        fn erf(x: f64) -> f64 {
            let sign = if x < 0.0 { -1.0 } else { 1.0 };
            let x = x.abs();
            let t = 1.0 / (1.0 + 0.3275911 * x);
            let poly = t
                * (0.254829592
                    + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
            sign * (1.0 - poly * (-x * x).exp())
        }
        for i in -40..=40 {
            let x = f64::from(i) * 0.25;
            let exact = 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2));
            let got = f64::from(Tensor::new(&[1, 1], vec![x as f32]).gelu().data()[0]);
            assert!((got - exact).abs() < 1e-3, "x={x}: {got} vs {exact}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::new(&[1, 4], vec![3.0; 4]);
        let g = Tensor::new(&[4], vec![1.0; 4]);
        let b = Tensor::new(&[4], vec![0.0; 4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap().data();
        assert!(y.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn layer_norm_row_statistics() {
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]);
        let g = Tensor::new(&[3], vec![1.0; 3]);
        let b = Tensor::new(&[3], vec![0.0; 3]);
        let y = x.layer_norm(&g, &b, 1e-9).unwrap().data();
        let mean: f32 = y.iter().sum::<f32>() / 3.0;
        let var: f32 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let data: Vec<f32> = (0..6).map(|i| ((i * 31 + 7) % 13) as f32 / 3.0 - 2.0).collect();
        let x = Tensor::new(&[2, 3], data.clone());
        let g = Tensor::new(&[3], vec![1.5, -0.5, 2.0]);
        let b = Tensor::new(&[3], vec![0.1, 0.2, -0.3]);
        let eps = 1e-5f32;
        let y = x.layer_norm(&g, &b, eps).unwrap().data();
        let (gd, bd) = (g.data(), b.data());
        for i in 0..2 {
            let row = &data[i * 3..(i + 1) * 3];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 3.0;
            for j in 0..3 {
                let xh = (row[j] as f64 - mean) / (var + eps as f64).sqrt();
                let expect = gd[j] as f64 * xh + bd[j] as f64;
                assert!((y[i * 3 + j] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ce_loss_saturated_case() {
        let mut logits = vec![0.0f32; 4];
        logits[2] = 20.0;
        let x = Tensor::new(&[1, 4], logits);
        let loss = x.softmax_ce_loss(&[Some(2)]).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn ce_loss_uniform_is_ln_v() {
        let x = Tensor::new(&[1, 4], vec![0.5; 4]);
        let loss = x.softmax_ce_loss(&[Some(1)]).unwrap();
        assert!((loss.item() - 4.0f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn ce_loss_all_ignored_is_zero() {
        let x = Tensor::with_grad(&[2, 4], vec![0.3; 8]);
        let loss = x.softmax_ce_loss(&[None, None]).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ce_loss_label_out_of_range() {
        let x = Tensor::zeros(&[1, 4]);
        let err = x.softmax_ce_loss(&[Some(4)]).unwrap_err();
        assert!(matches!(err, TensorError::LabelOutOfRange { label: 4, vocab: 4, pos: 0 }));
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::with_grad(&[1, 1], vec![3.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_detached_input_gets_no_grad() {
        let x = Tensor::with_grad(&[1, 2], vec![1.0, 2.0]);
        let loss = x.detach().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let x = Tensor::with_grad(&[1, 1], vec![2.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_non_scalar_is_an_error() {
        let x = Tensor::with_grad(&[1, 2], vec![1.0, 2.0]);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_shared_node_accumulates() {
        // loss = x*x + x -> grad = 2x + 1
        let x = Tensor::with_grad(&[1, 1], vec![4.0]);
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let a_data: Vec<f32> = (0..20).map(|i| (i as f32 * 0.73).sin()).collect();
        let b_data: Vec<f32> = (0..20).map(|i| (i as f32 * 1.31).cos()).collect();
        let run = || {
            let a = Tensor::new(&[4, 5], a_data.clone());
            let b = Tensor::new(&[5, 4], b_data.clone());
            a.matmul(&b).unwrap().gelu().sum().item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let x = Tensor::new(&[2, 2], vec![1.0, 5.0, 0.5, 0.5]);
        let y = x.masked_softmax_rows(&AttnMask::causal(2)).unwrap().data();
        assert_eq!(y[0], 1.0); // row 0 may only see itself
        assert_eq!(y[1], 0.0);
        assert!((y[2] + y[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(&[1, 3], vec![7.0, 8.0, 9.0]);
        let c = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), vec![3, 3]);
        assert_eq!(c.slice_rows(2, 3).unwrap().data(), vec![7.0, 8.0, 9.0]);
        let cols = c.slice_cols(1, 3).unwrap();
        assert_eq!(cols.shape(), vec![3, 2]);
        assert_eq!(cols.data()[0..2], [2.0, 3.0]);
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let table = Tensor::with_grad(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = table.embed(&[2, 0, 2]).unwrap();
        assert_eq!(out.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = out.sum();
        loss.backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let table = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            table.embed(&[3]),
            Err(TensorError::EmbedOutOfRange { id: 3, rows: 3 })
        ));
    }
}
