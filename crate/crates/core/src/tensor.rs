//! Row-major dense matrices and the handful of kernels the backbone needs.

use rand::Rng;

/// Dense row-major `rows × cols` matrix of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps `data`; panics if its length is not `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
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

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Gathers rows: output row `k` is input row `idx[k]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, out)
    }

    /// Scatters rows: output row `idx[k]` is input row `k`. `idx` must be a permutation.
    pub fn scatter_rows(&self, idx: &[usize]) -> Matrix {
        assert_eq!(idx.len(), self.rows);
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(k));
        }
        out
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_slice(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols);
        let mut out = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            out.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix::from_vec(self.rows, width, out)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn hconcat(parts: &[Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, |m| m.rows);
        assert!(parts.iter().all(|m| m.rows == rows));
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                out.extend_from_slice(m.row(r));
            }
        }
        Matrix::from_vec(rows, cols, out)
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn vconcat(parts: &[Matrix], cols: usize) -> Matrix {
        assert!(parts.iter().all(|m| m.cols == cols));
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for m in parts {
            out.extend_from_slice(&m.data);
        }
        Matrix::from_vec(rows, cols, out)
    }

    /// Reverses the row order.
    pub fn reversed_rows(&self) -> Matrix {
        let idx: Vec<usize> = (0..self.rows).rev().collect();
        self.gather_rows(&idx)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f32) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `self · w` where `w` is `cols × out`.
    pub fn matmul(&self, w: &Matrix) -> Matrix {
        assert_eq!(self.cols, w.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, w.cols);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: avx2 support was just detected
            unsafe { matmul_avx2(self, w, &mut out) };
            return out;
        }
        matmul_into(self, w, &mut out);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(x: &Matrix, w: &Matrix, out: &mut Matrix) {
    matmul_into(x, w, out)
}

/// Rows go four at a time so each row of `w` is loaded once per block.
#[inline(always)]
fn matmul_into(x_mat: &Matrix, w: &Matrix, out: &mut Matrix) {
    let (n, m) = (x_mat.cols, w.cols);
    if n == 0 || m == 0 {
        return;
    }
    let mut blocks = out.data.chunks_exact_mut(4 * m);
    let mut inputs = x_mat.data.chunks_exact(4 * n);
    for (o, x) in blocks.by_ref().zip(inputs.by_ref()) {
        let (o0, rest) = o.split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        for k in 0..n {
            let (a0, a1, a2, a3) = (x[k], x[n + k], x[2 * n + k], x[3 * n + k]);
            let wr = &w.data[k * m..(k + 1) * m];
            for j in 0..m {
                let wv = wr[j];
                o0[j] += a0 * wv;
                o1[j] += a1 * wv;
                o2[j] += a2 * wv;
                o3[j] += a3 * wv;
            }
        }
    }
    for (o, x) in blocks
        .into_remainder()
        .chunks_exact_mut(m)
        .zip(inputs.remainder().chunks_exact(n))
    {
        for (k, &xv) in x.iter().enumerate() {
            for (ov, &wv) in o.iter_mut().zip(&w.data[k * m..(k + 1) * m]) {
                *ov += xv * wv;
            }
        }
    }
}

/// Affine map `x · weight + bias`, with `weight` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)`; bias zero.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Self {
            weight: Matrix::uniform(fan_in, fan_out, bound, rng),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        if self.bias.iter().any(|&b| b != 0.0) {
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                    *v += b;
                }
            }
        }
        y
    }
}

/// Row-wise layer normalization with affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f32 = 1e-5;

    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.gamma.len());
        let mut out = x.clone();
        let n = x.cols() as f32;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f32>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + exp_fast(-x))
}

/// `ln(1 + e^x)` as `max(x, 0) + ln(1 + e^{−|x|})`, which never overflows.
#[inline]
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + ln1p_unit(exp_fast(-x.abs()))
}

/// `ln(1 + y)` for `y ∈ [0, 1]` through `2·atanh(y / (2 + y))`.
#[inline(always)]
fn ln1p_unit(y: f32) -> f32 {
    let s = y / (2.0 + y);
    let s2 = s * s;
    let series = 1.0
        + s2 * (1.0 / 3.0
            + s2 * (1.0 / 5.0
                + s2 * (1.0 / 7.0
                    + s2 * (1.0 / 9.0
                        + s2 * (1.0 / 11.0 + s2 * (1.0 / 13.0 + s2 * (1.0 / 15.0)))))));
    2.0 * s * series
}

/// `e^x` as `2^k · p(r)` with `|r| ≤ ln2/2`, a few ulp from the correctly
/// rounded value. Branch-free so loops over it vectorize. Inputs are clamped
/// to `[-87, 88]`.
#[inline(always)]
pub fn exp_fast(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let shifted = x * std::f32::consts::LOG2_E + ROUND;
    let k = shifted - ROUND;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (1.0 / 2.0
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    // the low mantissa bits of `shifted + 127` hold the biased exponent of 2^k
    p * f32::from_bits((shifted + 127.0).to_bits() << 23)
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_fast_tracks_std() {
        let mut worst = 0.0f64;
        for i in -8700..=8800 {
            let x = i as f32 / 100.0;
            let want = (x as f64).exp();
            worst = worst.max(((exp_fast(x) as f64) - want).abs() / want);
        }
        assert!(worst < 5e-7, "relative error {worst}");
        assert!(exp_fast(f32::NAN).is_nan());
    }

    #[test]
    fn softplus_tracks_reference() {
        for i in -3000..=3000 {
            let x = i as f32 / 100.0;
            let want = (x as f64).exp().ln_1p();
            let got = softplus(x) as f64;
            assert!(
                (got - want).abs() <= 3e-7 * want.max(1.0),
                "x={x}: {got} vs {want}"
            );
        }
        assert!(softplus(f32::NAN).is_nan());
    }

    #[test]
    fn blocked_matmul_matches_naive() {
        let a = Matrix::from_fn(7, 5, |r, c| (r * 5 + c) as f32 * 0.25 - 3.0);
        let w = Matrix::from_fn(5, 3, |r, c| (r as f32 - c as f32) * 0.5);
        let y = a.matmul(&w);
        for r in 0..7 {
            for c in 0..3 {
                let want: f32 = (0..5).map(|k| a.get(r, k) * w.get(k, c)).sum();
                assert!((y.get(r, c) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        assert_eq!(a.matmul(&b).as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn gather_then_scatter_is_identity() {
        let m = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f32);
        let perm = [2, 0, 3, 1];
        assert_eq!(m.gather_rows(&perm).scatter_rows(&perm), m);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let m = Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 10.0]);
        let out = LayerNorm::new(4).forward(&m);
        let mean: f32 = out.row(0).iter().sum::<f32>() / 4.0;
        let var: f32 = out.row(0).iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softplus_is_positive_for_large_negative() {
        assert!(softplus(-50.0) > 0.0);
        assert_eq!(softplus(100.0), 100.0);
    }
}
