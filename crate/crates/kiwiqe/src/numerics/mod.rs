//! Dense f64 tensors, the simplex transformations (softmax / sparsemax),
//! and reverse-mode differentiation on a recording tape.
//!
//! Everything downstream (encoder, heads, losses, explainers) is built from
//! the operations here. Tensors are row-major and immutable once handed to a
//! tape; 64-bit floats throughout.

mod tape;

pub use tape::{GradTape, Gradients, Var};

use serde::{Deserialize, Serialize};

use crate::error::{KiwiError, Result};

/// Dense row-major tensor. Scalars are `1x1`, vectors are `1xk` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    requires_grad: bool,
}

impl Tensor {
    /// Construct from external input; rejects NaN/Inf and length mismatches.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KiwiError::shape(
                "Tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(KiwiError::Value(format!("non-finite entry {x} in tensor data")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Internal constructor for values produced by our own ops; skips checks.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::from_parts(vec![1, n], data)
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::from_parts(vec![1, 1], vec![x])
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_parts(vec![rows, cols], vec![0.0; rows * cols])
    }

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Row count, treating the tensor as 2-D.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Column count, treating the tensor as 2-D.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(KiwiError::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(KiwiError::shape(op, format!("expected 2-D tensor, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = dims2(a, "matmul")?;
    let (k2, m) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(KiwiError::shape(
            "matmul",
            format!("inner dims {}x{} vs {}x{}", n, k, k2, m),
        ));
    }
    Ok(matmul_raw(a, b))
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in arow.iter().enumerate().take(k) {
            if aip == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// `a (n x k) * b^T (k x m)` where `b` is `m x k`.
pub(crate) fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.rows();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// `a^T (k x n) * b (k x m)` where `a` is `k x n`.
pub(crate) fn matmul_tn_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n) = (a.rows(), a.cols());
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &api) in arow.iter().enumerate().take(n) {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += api * brow[j];
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let (n, m) = (z.rows(), z.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        softmax_into(z.row(i), &mut out[i * m..(i + 1) * m]);
    }
    Tensor::from_parts(vec![n, m], out)
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise Euclidean projection onto the probability simplex
/// (sort-and-threshold algorithm). Entries at or below the threshold come
/// out exactly zero.
pub fn sparsemax_rows(z: &Tensor) -> Tensor {
    let (n, m) = (z.rows(), z.cols());
    let mut out = vec![0.0; n * m];
    let mut sorted = vec![0.0; m];
    for i in 0..n {
        let row = z.row(i);
        sorted.copy_from_slice(row);
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cum = 0.0;
        let mut support = 0;
        let mut cum_at_support = 0.0;
        for (k, &zk) in sorted.iter().enumerate() {
            cum += zk;
            if 1.0 + (k + 1) as f64 * zk > cum {
                support = k + 1;
                cum_at_support = cum;
            }
        }
        let tau = (cum_at_support - 1.0) / support as f64;
        for (o, &x) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
            *o = (x - tau).max(0.0);
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Support set of one sparsemax output row: indices with strictly positive mass.
pub(crate) fn sparsemax_support(probs: &[f64]) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(j, _)| j)
        .collect()
}

/// Per-row Euclidean norm: `n x d -> n x 1`.
pub fn l2_norm_rows(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        *o = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Tensor::from_parts(vec![n, 1], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(KiwiError::shape(
            "add",
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_parts(a.shape.clone(), a.data.iter().map(|x| x * c).collect())
}

/// Which transformation maps mix logits onto the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimplexTransform {
    Softmax,
    Sparsemax,
}

impl SimplexTransform {
    pub fn apply_rows(&self, z: &Tensor) -> Tensor {
        match self {
            SimplexTransform::Softmax => softmax_rows(z),
            SimplexTransform::Sparsemax => sparsemax_rows(z),
        }
    }
}

/// A logit vector together with its simplex image. With sparsemax some
/// probabilities may be exactly zero; rows always sum to 1 within 1e-9.
#[derive(Debug, Clone)]
pub struct SimplexWeights {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub transform: SimplexTransform,
}

impl SimplexWeights {
    pub fn new(logits: Vec<f64>, transform: SimplexTransform) -> SimplexWeights {
        let z = Tensor::row_vector(logits.clone());
        let probs = transform.apply_rows(&z).data().to_vec();
        SimplexWeights {
            logits,
            probs,
            transform,
        }
    }
}
