//! Dense double-precision tensors.
//!
//! Values are immutable after creation; cloning shares the underlying buffer,
//! so frozen weights can be snapshotted and shared across threads cheaply.

use std::sync::Arc;

use crate::error::{CdlError, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not address {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data: data.into() }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape.to_vec(), vec![v; shape.iter().product()])
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(vec![n, n], data)
    }

    pub fn randn(shape: &[usize], sigma: f64, rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * sigma).collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if the tensor is not a scalar.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Vector length if rank 1 (or a 1xN / Nx1 matrix), else None.
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self.shape.len() {
            1 => Some(&self.data),
            2 if self.shape[0] == 1 || self.shape[1] == 1 => Some(&self.data),
            _ => None,
        }
    }

    pub fn nrows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "nrows on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn ncols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "ncols on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.ncols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw IEEE-754 bit patterns; bit-identical values are
    /// the only values that hash equal.
    pub fn bit_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in self.shape.iter().map(|&s| s as u64).chain(self.data.iter().map(|v| v.to_bits())) {
            for b in d.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cosine similarity of two equal-length nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CdlError::Contract(format!(
            "cosine_similarity length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(CdlError::DegenerateInput(
            "cosine_similarity of a zero-norm vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Temperature-softened softmax with contract checks: `tau` must be positive
/// and the logits finite. Output is strictly positive and sums to one.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(CdlError::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CdlError::Numeric("softmax over non-finite logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_temp_into(logits, tau, &mut out);
    Ok(out)
}

/// Numerically stable softmax of `logits / tau` into `out`.
pub fn softmax_temp_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = ((l - m) / tau).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
