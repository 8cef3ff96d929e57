//! A minimal dense row-major f64 matrix.
//!
//! The network and diffusion code only need a handful of operations, and the
//! training loop is dominated by a few small-by-wide matrix products, so a
//! hand-rolled type with cache-friendly loops keeps the hot path simple and
//! fast without pulling in a linear-algebra stack.

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, with the accumulation loop ordered so the inner loop
    /// runs over contiguous rows of `other` (vectorizes well).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o = a.mul_add(b, *o);
                }
            }
        }
        out
    }

    /// `self * other^T`; inner loop is a dot product of two contiguous rows.
    pub fn matmul_transpose(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_transpose shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, other.row(j));
            }
        }
        out
    }

    /// `self^T * other`, accumulated row-by-row so the inner loop streams.
    pub fn transpose_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "transpose_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o = a.mul_add(b, *o);
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Adds `row` to every row of the matrix.
    pub fn add_row_broadcast(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        for i in 0..self.rows {
            for (a, b) in self.row_mut(i).iter_mut().zip(row.iter()) {
                *a += b;
            }
        }
    }

    /// Row-wise softmax in place, with the usual max subtraction.
    pub fn softmax_rows(&mut self) {
        for i in 0..self.rows {
            softmax_in_place(self.row_mut(i));
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc = x.mul_add(*y, acc);
    }
    acc
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transpose_matches_explicit() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let b = Mat::from_fn(2, 4, |i, j| (i + j) as f64 * 0.5);
        let bt = Mat::from_fn(4, 2, |i, j| b.get(j, i));
        assert_eq!(a.matmul_transpose(&b), a.matmul(&bt));
    }

    #[test]
    fn transpose_matmul_matches_explicit() {
        let a = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let at = Mat::from_fn(2, 3, |i, j| a.get(j, i));
        let b = Mat::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.25);
        assert_eq!(a.transpose_matmul(&b), at.matmul(&b));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = Mat::from_fn(4, 7, |i, j| ((i * 31 + j * 17) % 13) as f64 - 6.0);
        m.softmax_rows();
        for i in 0..4 {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.row(i).iter().all(|&p| p > 0.0));
        }
    }
}
