//! Dense matrices, a reverse-mode tape, Adam and checkpoint files.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

use std::fmt::Debug;

use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Adam, ParamId, ParamStore};
pub use tape::{Grads, SparseRows, Tape, Var};

/// Logits are clamped to this magnitude before normalization.
pub const LOGIT_CLIP: f64 = 50.0;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("masked_log_softmax: row {row} has every entry masked")]
    AllMasked { row: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating types the engine runs on.
pub trait Scalar: num_traits::Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn scalar(x: T) -> Self {
        Matrix::from_vec(1, 1, vec![x])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: T) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a · b`. Each output row depends only on the matching row of `a`, and the
/// summation order is fixed, so results do not depend on batch composition.
pub fn matmul_kernel<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let x = a.data[i * a.cols + k];
            if x == T::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}

/// Log-softmax of one row over the unmasked entries; masked entries are
/// `-inf`. Logits are clipped to `±LOGIT_CLIP` and the normalizer is
/// accumulated in f64.
pub fn log_softmax_row<T: Scalar>(logits: &[T], mask: &[bool]) -> Option<Vec<T>> {
    let clip = |x: T| x.as_f64().clamp(-LOGIT_CLIP, LOGIT_CLIP);
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| clip(x))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (clip(x) - max).exp())
        .sum();
    let lse = max + sum.ln();
    Some(
        logits
            .iter()
            .zip(mask)
            .map(|(&x, &m)| {
                if m {
                    T::from_f64(clip(x) - lse)
                } else {
                    T::neg_infinity()
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let x = Matrix::<f64>::from_f64(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul_kernel(&Matrix::identity(3), &x), x);
    }

    #[test]
    fn softmax_rows() {
        let lp = log_softmax_row(&[0.0f64, 0.0], &[true, true]).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
        let lp = log_softmax_row(&[3.0f64, 1.0], &[true, false]).unwrap();
        assert_eq!(lp[0], 0.0);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        assert!(log_softmax_row(&[1.0f64], &[false]).is_none());
    }

    #[test]
    fn softmax_shift_invariance_and_clip() {
        let a = log_softmax_row(&[1.0f64, 2.0, 3.0], &[true; 3]).unwrap();
        let b = log_softmax_row(&[11.0f64, 12.0, 13.0], &[true; 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = log_softmax_row(&[1e6f64, 0.0], &[true; 2]).unwrap();
        assert!(c.iter().all(|x| x.is_finite()));
        let s: f64 = c.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
