//! Slow reference implementations used by `check` and the test suites.
//!
//! None of these share code paths with the kernels they verify: Morton order
//! is checked with a pairwise bit comparator, scans with the O(L²) unrolled
//! sum, ZOH with Simpson quadrature and sparse convolution against dense grids.

use std::cmp::Ordering;

use crate::curves::Priority;
use crate::sparseconv::SparseConvWeights;
use crate::tensor::Matrix;
use crate::voxelgrid::SparseVoxelTensor;

/// Orders two coordinates by Z-order without building codes: the axis holding
/// the most significant differing bit decides; on equal bit position the axis
/// occupying the higher interleave slot wins (z, then the secondary axis).
pub fn morton_compare(a: [u32; 3], b: [u32; 3], priority: Priority) -> Ordering {
    let slot = |axis: usize| match (priority, axis) {
        (_, 2) => 2,
        (Priority::XFirst, 0) | (Priority::YFirst, 1) => 0,
        _ => 1,
    };
    let mut best: Option<(u32, u32, usize)> = None;
    for axis in 0..3 {
        let diff = a[axis] ^ b[axis];
        if diff == 0 {
            continue;
        }
        let key = (31 - diff.leading_zeros(), slot(axis), axis);
        if best.is_none_or(|b| (key.0, key.1) > (b.0, b.1)) {
            best = Some(key);
        }
    }
    match best {
        None => Ordering::Equal,
        Some((_, _, axis)) => a[axis].cmp(&b[axis]),
    }
}

pub fn morton_order(coords: &[[u32; 3]], priority: Priority) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by(|&i, &j| morton_compare(coords[i], coords[j], priority));
    idx
}

/// Composite Simpson rule for `∫₀^Δ exp(s·a)·b ds` with `intervals` (rounded up to even) panels.
pub fn zoh_quadrature(a: f64, b: f64, delta: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = delta / n as f64;
    let f = |s: f64| (s * a).exp() * b;
    let mut sum = f(0.0) + f(delta);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(i as f64 * h);
    }
    sum * h / 3.0
}

/// `y_t = Σ_{j≤t} C_t · (Π_{i=j+1..t} Ā_i) · B̄_j x_j + skip·x_t`, evaluated
/// directly in O(L²·D·N) with `B̄ = (e^{Δa} − 1)/a · b`.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_scan(
    len: usize,
    d_inner: usize,
    d_state: usize,
    x: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    skip: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; len * d_inner];
    for t in 0..len {
        for d in 0..d_inner {
            let mut acc = skip[d] * x[t * d_inner + d];
            for n in 0..d_state {
                let av = a[d * d_state + n];
                let mut decay = 1.0;
                let mut sum = 0.0;
                for j in (0..=t).rev() {
                    let dt = delta[j * d_inner + d];
                    let bbar = (dt * av).exp_m1() / av * b[j * d_state + n];
                    sum += decay * bbar * x[j * d_inner + d];
                    decay *= (dt * av).exp();
                }
                acc += c[t * d_state + n] * sum;
            }
            y[t * d_inner + d] = acc;
        }
    }
    y
}

/// Dense `(X, Y, Z, C)` embedding in f64.
struct DenseGrid {
    shape: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl DenseGrid {
    fn zeros(shape: [u32; 3], channels: usize) -> Self {
        let shape = shape.map(|v| v as usize);
        Self {
            shape,
            channels,
            data: vec![0.0; shape.iter().product::<usize>() * channels],
        }
    }

    fn from_tensor(t: &SparseVoxelTensor) -> Self {
        let mut g = Self::zeros(t.grid_shape(), t.channels());
        for (r, c) in t.coords().iter().enumerate() {
            let o = g.offset([c[0] as i64, c[1] as i64, c[2] as i64]).unwrap();
            for (k, &v) in t.features().row(r).iter().enumerate() {
                g.data[o + k] = v as f64;
            }
        }
        g
    }

    fn offset(&self, p: [i64; 3]) -> Option<usize> {
        for d in 0..3 {
            if p[d] < 0 || p[d] >= self.shape[d] as i64 {
                return None;
            }
        }
        let (x, y, z) = (p[0] as usize, p[1] as usize, p[2] as usize);
        Some(((x * self.shape[1] + y) * self.shape[2] + z) * self.channels)
    }
}

fn taps(w: &SparseConvWeights) -> Vec<(usize, [i64; 3])> {
    let k = w.kernel_size;
    let mut out = Vec::new();
    for dx in 0..k[0] {
        for dy in 0..k[1] {
            for dz in 0..k[2] {
                out.push((w.tap_index([dx, dy, dz]), [dx as i64, dy as i64, dz as i64]));
            }
        }
    }
    out
}

fn accumulate(out: &mut [f64], input: &[f64], w: &Matrix) {
    for (ci, &v) in input.iter().enumerate() {
        for (co, o) in out.iter_mut().enumerate() {
            *o += v * w.get(ci, co) as f64;
        }
    }
}

/// Dense correlation evaluated at the input's active sites.
pub fn dense_submanifold(t: &SparseVoxelTensor, w: &SparseConvWeights) -> Matrix {
    let g = DenseGrid::from_tensor(t);
    let half = w.kernel_size.map(|k| (k / 2) as i64);
    let mut out = Matrix::zeros(t.len(), w.c_out());
    for (r, c) in t.coords().iter().enumerate() {
        let mut acc: Vec<f64> = w.bias.iter().map(|&b| b as f64).collect();
        for (tap, d) in taps(w) {
            let p = [
                c[0] as i64 + d[0] - half[0],
                c[1] as i64 + d[1] - half[1],
                c[2] as i64 + d[2] - half[2],
            ];
            if let Some(o) = g.offset(p) {
                accumulate(&mut acc, &g.data[o..o + g.channels], &w.kernel[tap]);
            }
        }
        for (k, v) in acc.into_iter().enumerate() {
            out.set(r, k, v as f32);
        }
    }
    out
}

/// Dense strided convolution over every coarse cell, then read at `sites`.
pub fn dense_strided(t: &SparseVoxelTensor, w: &SparseConvWeights, sites: &[[u32; 3]]) -> Matrix {
    let g = DenseGrid::from_tensor(t);
    let coarse_shape = [
        t.grid_shape()[0].div_ceil(w.stride[0]),
        t.grid_shape()[1].div_ceil(w.stride[1]),
        t.grid_shape()[2].div_ceil(w.stride[2]),
    ];
    let pad = w.padding();
    let s = w.stride.map(i64::from);
    let mut dense_out = DenseGrid::zeros(coarse_shape, w.c_out());
    for ox in 0..coarse_shape[0] as i64 {
        for oy in 0..coarse_shape[1] as i64 {
            for oz in 0..coarse_shape[2] as i64 {
                let dst = dense_out.offset([ox, oy, oz]).unwrap();
                let mut acc: Vec<f64> = w.bias.iter().map(|&b| b as f64).collect();
                for (tap, d) in taps(w) {
                    let p = [
                        ox * s[0] + d[0] - pad[0],
                        oy * s[1] + d[1] - pad[1],
                        oz * s[2] + d[2] - pad[2],
                    ];
                    if let Some(o) = g.offset(p) {
                        accumulate(&mut acc, &g.data[o..o + g.channels], &w.kernel[tap]);
                    }
                }
                dense_out.data[dst..dst + w.c_out()].copy_from_slice(&acc);
            }
        }
    }
    read_sites(&dense_out, sites)
}

/// Scatter-form transposed convolution over the dense coarse grid, read at `targets`.
pub fn dense_inverse(
    coarse: &SparseVoxelTensor,
    targets: &[[u32; 3]],
    target_grid: [u32; 3],
    w: &SparseConvWeights,
) -> Matrix {
    let g = DenseGrid::from_tensor(coarse);
    let pad = w.padding();
    let s = w.stride.map(i64::from);
    let mut fine = DenseGrid::zeros(target_grid, w.c_out());
    for ox in 0..g.shape[0] as i64 {
        for oy in 0..g.shape[1] as i64 {
            for oz in 0..g.shape[2] as i64 {
                let src = g.offset([ox, oy, oz]).unwrap();
                let input = &g.data[src..src + g.channels];
                for (tap, d) in taps(w) {
                    let p = [
                        ox * s[0] + d[0] - pad[0],
                        oy * s[1] + d[1] - pad[1],
                        oz * s[2] + d[2] - pad[2],
                    ];
                    if let Some(o) = fine.offset(p) {
                        accumulate(&mut fine.data[o..o + w.c_out()], input, &w.kernel[tap]);
                    }
                }
            }
        }
    }
    for x in 0..fine.shape[0] as i64 {
        for y in 0..fine.shape[1] as i64 {
            for z in 0..fine.shape[2] as i64 {
                let o = fine.offset([x, y, z]).unwrap();
                for (v, &b) in fine.data[o..o + w.c_out()].iter_mut().zip(&w.bias) {
                    *v += b as f64;
                }
            }
        }
    }
    read_sites(&fine, targets)
}

fn read_sites(g: &DenseGrid, sites: &[[u32; 3]]) -> Matrix {
    let mut out = Matrix::zeros(sites.len(), g.channels);
    for (r, c) in sites.iter().enumerate() {
        let o = g
            .offset([c[0] as i64, c[1] as i64, c[2] as i64])
            .expect("site inside grid");
        for k in 0..g.channels {
            out.set(r, k, g.data[o + k] as f32);
        }
    }
    out
}
