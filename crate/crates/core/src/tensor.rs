//! Dense row-major tensors and the raw (tape-free) kernels behind every op.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Working precision. `f32` by default; the `f64` feature exists for the
/// double-precision gradient-check build.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

/// A dense n-dimensional array. `grad`, when present, has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Scalar>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Construct without validation; callers guarantee `numel(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: Scalar) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: Scalar, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as Scalar * std
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: Scalar, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> Scalar {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Explicit finiteness check; the hot paths never test for NaN on their own.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                what: what.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Row `i` of the tensor viewed as `[rows, last]`.
    pub fn row(&self, i: usize) -> &[Scalar] {
        let n = *self.shape.last().unwrap_or(&1);
        &self.data[i * n..(i + 1) * n]
    }
}

/// Split a shape into (rows, last extent) for last-axis kernels.
pub(crate) fn rows_last(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    if n == 0 {
        return (0, 0);
    }
    (numel(shape) / n, n)
}

/// `c[m×n] += a[m×k] · b[k×n]`, i-k-j order so the inner loop is contiguous.
pub(crate) fn gemm_acc(a: &[Scalar], b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[Scalar], b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s: Scalar = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[Scalar], b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Softmax over each contiguous row of length `n`, max-subtracted.
pub(crate) fn softmax_rows(x: &[Scalar], n: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum: Scalar = 0.0;
        for (ov, &xv) in o.iter_mut().zip(row) {
            *ov = (xv - max).exp();
            sum += *ov;
        }
        let inv = 1.0 / sum;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn softmax(x: &Tensor) -> Tensor {
    let (_, n) = rows_last(&x.shape);
    Tensor::from_parts(x.shape.clone(), softmax_rows(&x.data, n))
}

/// Log-sum-exp with inverse temperature: `β⁻¹ · log Σ exp(β·zᵢ)`.
pub fn lse(beta: f64, z: &[Scalar]) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Param(format!("lse requires beta > 0, got {beta}")));
    }
    if z.is_empty() {
        return Err(Error::Param("lse of an empty vector".into()));
    }
    let max = z.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (beta * (v as f64 - max)).exp()).sum();
    Ok(max + sum.ln() / beta)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Indices kept by top-k along each row: the `k` largest values, ties broken
/// toward the lower index.
pub(crate) fn top_k_row_mask(row: &[Scalar], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort on descending value keeps lower indices first among ties.
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut mask = vec![false; row.len()];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Zero all but the `k` highest entries of each last-axis row. Survivors are
/// not renormalized.
pub fn top_k_mask(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, n) = rows_last(&x.shape);
    if k < 1 || k > n {
        return Err(Error::Param(format!("top-k requires 1 <= k <= {n}, got k={k}")));
    }
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.data.chunks(n).zip(out.chunks_mut(n)) {
        for (j, keep) in top_k_row_mask(row, k).into_iter().enumerate() {
            if keep {
                o[j] = row[j];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Generic axis permutation. Returns the permuted data and new shape.
pub(crate) fn permute_data(data: &[Scalar], shape: &[usize], axes: &[usize]) -> (Vec<Scalar>, Vec<usize>) {
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let rank = new_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += src_strides[d];
            if counter[d] < new_shape[d] {
                break;
            }
            offset -= src_strides[d] * new_shape[d];
            counter[d] = 0;
        }
    }
    (out, new_shape)
}

pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let mut seen = vec![false; x.rank()];
    if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", &x.shape, axes));
    }
    let (data, shape) = permute_data(&x.data, &x.shape, axes);
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
