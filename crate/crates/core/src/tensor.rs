//! Dense fp32 kernels over row-major matrices.
//!
//! Every reduction runs in a fixed order (inner index ascending) so results
//! are reproducible bit for bit across runs and call sites.

use crate::error::{KcError, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KcError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(KcError::shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from `[-bound, bound]`, row-major order.
    pub fn random(rows: usize, cols: usize, bound: f32, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform_symmetric(bound)).collect();
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(KcError::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// `a × b` with fp32 accumulation, inner index ascending.
///
/// Loop order is i-k-j, which adds the `k`-th partial product into each
/// output cell in ascending `k`, the same sequence as the textbook triple
/// loop, so the two agree bitwise.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(KcError::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn silu_matrix(m: &Matrix) -> Matrix {
    m.map(silu)
}

/// `row * gain / sqrt(mean(row^2) + eps)`.
pub fn rms_norm(row: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if row.len() != gain.len() {
        return Err(KcError::shape(format!("rms_norm row {} vs gain {}", row.len(), gain.len())));
    }
    if row.is_empty() {
        return Ok(Vec::new());
    }
    let mut sum_sq = 0.0f32;
    for &v in row {
        sum_sq += v * v;
    }
    let inv = 1.0 / (sum_sq / row.len() as f32 + eps).sqrt();
    Ok(row.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect())
}

/// Row-wise [`rms_norm`] over a matrix.
pub fn rms_norm_rows(m: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        data.extend(rms_norm(m.row(i), gain, eps)?);
    }
    Matrix::from_vec(m.rows, m.cols, data)
}

/// Indices of the `k` largest values, ascending.
///
/// `k` is clamped to `values.len()`; ties at the boundary go to the lowest
/// index.
pub fn arg_topk(values: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(KcError::arg("top-k requires k >= 1"));
    }
    if k >= values.len() {
        return Ok((0..values.len()).collect());
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Dot product, index ascending.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f32;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), b);

        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_seed7_matches_triple_loop_bitwise() {
        let mut rng = SeededRng::new(7);
        let a = Matrix::random(8, 8, 1.0, &mut rng);
        let b = Matrix::random(8, 8, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(KcError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(softmax_rows(&m).data(), &[0.25; 4]);

        let m = Matrix::from_rows(&[vec![1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&m).data(), &[0.5, 0.5]);

        let m = Matrix::from_rows(&[vec![0.0, 3.0f32.ln()]]).unwrap();
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-6);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(20.0) - 20.0).abs() < 1e-6);
        // Scalar oracle in f64: -20 / (1 + e^20).
        let want = -20.0f64 / (1.0 + 20.0f64.exp());
        assert!((silu(-20.0) as f64 - want).abs() < 1e-12);
        assert!((want + 4.122307e-8).abs() < 1e-13);
    }

    #[test]
    fn rms_norm_examples() {
        let ones = vec![1.0; 8];
        assert_eq!(rms_norm(&ones, &ones, 0.0).unwrap(), ones);

        let got = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let scale = 12.5f32.sqrt();
        assert!((got[0] - 3.0 / scale).abs() < 1e-7);
        assert!((got[1] - 4.0 / scale).abs() < 1e-7);

        assert!(matches!(rms_norm(&[1.0], &[1.0, 1.0], 1e-5), Err(KcError::Shape(_))));
    }

    #[test]
    fn rms_norm_matches_scalar_loop() {
        let mut rng = SeededRng::new(21);
        let row: Vec<f32> = (0..64).map(|_| rng.uniform_symmetric(2.0)).collect();
        let gain: Vec<f32> = (0..64).map(|_| rng.uniform_symmetric(1.0)).collect();
        let got = rms_norm(&row, &gain, 1e-5).unwrap();
        let ms: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 64.0;
        let denom = (ms + 1e-5).sqrt();
        for i in 0..64 {
            let want = row[i] as f64 * gain[i] as f64 / denom;
            // 1e-7 relative is below one f32 ulp near 1.5; allow two ulps.
            let tol = 2.0 * f32::EPSILON as f64 * want.abs().max(1e-3);
            assert!((got[i] as f64 - want).abs() <= tol, "{i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn arg_topk_examples() {
        assert_eq!(arg_topk(&[0.1, 0.4, 0.2, 0.3], 2).unwrap(), vec![1, 3]);
        assert_eq!(arg_topk(&[0.3, 0.1, 0.2], 5).unwrap(), vec![0, 1, 2]);
        assert_eq!(arg_topk(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert!(matches!(arg_topk(&[1.0], 0), Err(KcError::Argument(_))));
    }

    proptest! {
        #[test]
        fn matmul_is_bitwise_naive(r in 1usize..12, k in 1usize..12, c in 1usize..12, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = Matrix::random(r, k, 3.0, &mut rng);
            let b = Matrix::random(k, c, 3.0, &mut rng);
            let got = matmul(&a, &b).unwrap();
            let want = naive_matmul(&a, &b);
            for (x, y) in got.data().iter().zip(want.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            quarters in proptest::collection::vec(-120i32..120, 1..40),
            shift in -400i32..400,
        ) {
            // Quarter-integer inputs keep `v + c - (max + c)` exact in f32.
            let row: Vec<f32> = quarters.iter().map(|&q| q as f32 * 0.25).collect();
            let m = Matrix::from_vec(1, row.len(), row).unwrap();
            let s = softmax_rows(&m);
            let total: f32 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            let c = shift as f32 * 0.25;
            let s2 = softmax_rows(&m.map(|v| v + c));
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn arg_topk_selects_largest(
            values in proptest::collection::vec(-10.0f32..10.0, 1..50),
            k in 1usize..60,
        ) {
            let picked = arg_topk(&values, k).unwrap();
            prop_assert_eq!(picked.len(), k.min(values.len()));
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(picked.iter().all(|&i| i < values.len()));
            let min_sel = picked.iter().map(|&i| values[i]).fold(f32::INFINITY, f32::min);
            let max_unsel = (0..values.len())
                .filter(|i| !picked.contains(i))
                .map(|i| values[i])
                .fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(min_sel >= max_unsel);
        }
    }
}
