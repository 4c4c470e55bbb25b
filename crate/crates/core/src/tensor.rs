//! Dense row-major `f64` arrays and the matrix kernels shared by the tape and
//! the straight-line reference implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit reals in row-major order.
///
/// Rank-2 tensors are matrices, rank-3 tensors are batches of matrices
/// (`[batch, rows, cols]`). A scalar has shape `[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == m), "ragged rows");
        Tensor {
            shape: vec![n, m],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Length of the trailing axis.
    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[rows, row_len]`.
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `[batch, rows, cols]` view: rank 2 is a single batch entry.
    pub fn batched_dims(&self) -> Option<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Some((1, r, c)),
            [b, r, c] => Some((b, r, c)),
            _ => None,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// `c += op(a) · op(b)` for one `n×m` output block.
///
/// `a` is `n×k` (or `k×n` when `trans_a`), `b` is `k×m` (or `m×k` when
/// `trans_b`). Loop orders keep the innermost access contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
    trans_a: bool,
    trans_b: bool,
) {
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..n {
                let crow = &mut c[i * m..(i + 1) * m];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * m..(p + 1) * m];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * m..(p + 1) * m];
                for i in 0..n {
                    let av = a[p * n + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * m..(i + 1) * m];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..n {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..m {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        (true, true) => {
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * n + i] * b[j * k + p];
                    }
                    c[i * m + j] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2, false, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let mut c2 = [0.0; 4];
            let aa: &[f64] = if ta { &at } else { &a };
            let bb: &[f64] = if tb { &bt } else { &b };
            gemm_acc(aa, bb, &mut c2, 2, 3, 2, ta, tb);
            assert_eq!(c2, c, "trans_a={ta} trans_b={tb}");
        }
    }
}
