//! Sparse 3D convolution over [`SparseVoxelTensor`]s.
//!
//! Kernel taps are indexed `(dx · k_y + dy) · k_z + dz`. Each tap holds a
//! `C_in × C_out` matrix. Neighbours are found through a [`CoordIndex`] and
//! rows that share a tap are batched into one matrix product.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::voxelgrid::{CoordIndex, SparseVoxelTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites are exactly the input sites.
    Submanifold,
    /// Output sites are the distinct `floor(coord / stride)` cells.
    Strided,
    /// Transposed strided convolution onto a stored finer coordinate set.
    Inverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseConvWeights {
    pub kernel_size: [u32; 3],
    pub stride: [u32; 3],
    pub mode: ConvMode,
    /// One `C_in × C_out` matrix per tap.
    pub kernel: Vec<Matrix>,
    pub bias: Vec<f32>,
}

impl SparseConvWeights {
    pub fn new(
        kernel_size: [u32; 3],
        stride: [u32; 3],
        mode: ConvMode,
        kernel: Vec<Matrix>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let w = Self {
            kernel_size,
            stride,
            mode,
            kernel,
            bias,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(
        kernel_size: [u32; 3],
        stride: [u32; 3],
        mode: ConvMode,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let taps = kernel_size.iter().product::<u32>() as usize;
        Self {
            kernel_size,
            stride,
            mode,
            kernel: vec![Matrix::zeros(c_in, c_out); taps],
            bias: vec![0.0; c_out],
        }
    }

    /// Uniform init in `±1/sqrt(C_in · taps)`, zero bias.
    pub fn init<R: Rng>(
        kernel_size: [u32; 3],
        stride: [u32; 3],
        mode: ConvMode,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let taps = kernel_size.iter().product::<u32>() as usize;
        let bound = 1.0 / ((c_in * taps).max(1) as f32).sqrt();
        Self {
            kernel_size,
            stride,
            mode,
            kernel: (0..taps)
                .map(|_| Matrix::uniform(c_in, c_out, bound, rng))
                .collect(),
            bias: vec![0.0; c_out],
        }
    }

    /// Submanifold kernel whose centre tap is the identity.
    pub fn identity_submanifold(kernel_size: [u32; 3], channels: usize) -> Self {
        let mut w = Self::zeros(
            kernel_size,
            [1, 1, 1],
            ConvMode::Submanifold,
            channels,
            channels,
        );
        let center = w.tap_index([kernel_size[0] / 2, kernel_size[1] / 2, kernel_size[2] / 2]);
        w.kernel[center] =
            Matrix::from_fn(channels, channels, |r, c| if r == c { 1.0 } else { 0.0 });
        w
    }

    pub fn c_in(&self) -> usize {
        self.kernel.first().map_or(0, Matrix::rows)
    }

    pub fn c_out(&self) -> usize {
        self.bias.len()
    }

    pub fn tap_index(&self, d: [u32; 3]) -> usize {
        let k = self.kernel_size;
        ((d[0] * k[1] + d[1]) * k[2] + d[2]) as usize
    }

    /// Padding aligning kernel and stride: `(k − s) / 2`, floored at zero.
    pub fn padding(&self) -> [i64; 3] {
        let mut p = [0i64; 3];
        for d in 0..3 {
            p[d] = (self.kernel_size[d].saturating_sub(self.stride[d]) / 2) as i64;
        }
        p
    }

    fn taps(&self) -> impl Iterator<Item = (usize, [i64; 3])> + '_ {
        let k = self.kernel_size;
        (0..k[0]).flat_map(move |dx| {
            (0..k[1]).flat_map(move |dy| {
                (0..k[2]).map(move |dz| {
                    (
                        self.tap_index([dx, dy, dz]),
                        [dx as i64, dy as i64, dz as i64],
                    )
                })
            })
        })
    }

    pub fn validate(&self) -> Result<()> {
        let taps = self.kernel_size.iter().product::<u32>() as usize;
        if self.kernel_size.contains(&0) || self.stride.contains(&0) {
            return Err(Error::config(
                "kernel",
                "kernel extents and strides must be positive",
            ));
        }
        if self.kernel.len() != taps {
            return Err(Error::ShapeMismatch(format!(
                "{} kernel taps for extent {:?}",
                self.kernel.len(),
                self.kernel_size
            )));
        }
        let (ci, co) = (self.c_in(), self.c_out());
        if self.kernel.iter().any(|m| m.shape() != (ci, co)) {
            return Err(Error::ShapeMismatch(
                "kernel taps disagree on channel shape".into(),
            ));
        }
        if self.mode == ConvMode::Submanifold
            && (self.stride != [1, 1, 1] || self.kernel_size.iter().any(|k| k % 2 == 0))
        {
            return Err(Error::config(
                "kernel",
                "submanifold convolution needs odd extents and unit stride",
            ));
        }
        Ok(())
    }

    fn expect(&self, mode: ConvMode, input_channels: usize) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            return Err(Error::config(
                "mode",
                format!("expected {mode:?} weights, got {:?}", self.mode),
            ));
        }
        if input_channels != self.c_in() {
            return Err(Error::ShapeMismatch(format!(
                "input has {input_channels} channels, kernel expects {}",
                self.c_in()
            )));
        }
        Ok(())
    }
}

/// Accumulates `bias + Σ_tap gather(rule) · W[tap]` for `n_out` rows.
fn apply_rules(
    input: &Matrix,
    w: &SparseConvWeights,
    n_out: usize,
    rules: Vec<Vec<(usize, usize)>>,
) -> Matrix {
    let mut out = Matrix::zeros(n_out, w.c_out());
    for r in 0..n_out {
        out.row_mut(r).copy_from_slice(&w.bias);
    }
    for (tap, pairs) in rules.into_iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let src: Vec<usize> = pairs.iter().map(|&(_, i)| i).collect();
        let contrib = input.gather_rows(&src).matmul(&w.kernel[tap]);
        for (k, &(o, _)) in pairs.iter().enumerate() {
            for (dst, &v) in out.row_mut(o).iter_mut().zip(contrib.row(k)) {
                *dst += v;
            }
        }
    }
    out
}

/// Convolution restricted to the input's active sites; absent neighbours contribute zero.
pub fn submanifold_conv3d(
    t: &SparseVoxelTensor,
    w: &SparseConvWeights,
) -> Result<SparseVoxelTensor> {
    w.expect(ConvMode::Submanifold, t.channels())?;
    let index = CoordIndex::from_coords(t.coords())?;
    let center = [
        (w.kernel_size[0] / 2) as i64,
        (w.kernel_size[1] / 2) as i64,
        (w.kernel_size[2] / 2) as i64,
    ];
    let mut rules = vec![Vec::new(); w.kernel.len()];
    for (tap, d) in w.taps() {
        for (o, c) in t.coords().iter().enumerate() {
            let q = [
                c[0] as i64 + d[0] - center[0],
                c[1] as i64 + d[1] - center[1],
                c[2] as i64 + d[2] - center[2],
            ];
            if let Some(i) = index.get_signed(q) {
                rules[tap].push((o, i));
            }
        }
    }
    let features = apply_rules(t.features(), w, t.len(), rules);
    Ok(SparseVoxelTensor::from_parts_unchecked(
        t.coords().to_vec(),
        features,
        t.grid_shape(),
    ))
}

/// Grid shape after striding: `ceil(grid / stride)`.
pub fn strided_grid(grid: [u32; 3], stride: [u32; 3]) -> [u32; 3] {
    [
        grid[0].div_ceil(stride[0]),
        grid[1].div_ceil(stride[1]),
        grid[2].div_ceil(stride[2]),
    ]
}

/// Distinct `floor(coord / stride)` cells, first-seen order.
pub fn downsampled_coords(coords: &[[u32; 3]], stride: [u32; 3]) -> Vec<[u32; 3]> {
    let mut seen = std::collections::HashSet::with_capacity(coords.len());
    coords
        .iter()
        .map(|c| [c[0] / stride[0], c[1] / stride[1], c[2] / stride[2]])
        .filter(|c| seen.insert(*c))
        .collect()
}

/// Output site `o` reads input `o·s + δ − pad` for every tap `δ`.
pub fn strided_sparse_conv3d(
    t: &SparseVoxelTensor,
    w: &SparseConvWeights,
) -> Result<SparseVoxelTensor> {
    w.expect(ConvMode::Strided, t.channels())?;
    let index = CoordIndex::from_coords(t.coords())?;
    let out_coords = downsampled_coords(t.coords(), w.stride);
    let s = w.stride.map(i64::from);
    let pad = w.padding();
    let mut rules = vec![Vec::new(); w.kernel.len()];
    for (tap, d) in w.taps() {
        for (o, c) in out_coords.iter().enumerate() {
            let q = [
                c[0] as i64 * s[0] + d[0] - pad[0],
                c[1] as i64 * s[1] + d[1] - pad[1],
                c[2] as i64 * s[2] + d[2] - pad[2],
            ];
            if let Some(i) = index.get_signed(q) {
                rules[tap].push((o, i));
            }
        }
    }
    let n_out = out_coords.len();
    let features = apply_rules(t.features(), w, n_out, rules);
    Ok(SparseVoxelTensor::from_parts_unchecked(
        out_coords,
        features,
        strided_grid(t.grid_shape(), w.stride),
    ))
}

/// Adjoint of [`strided_sparse_conv3d`]: fine site `p` receives coarse site
/// `o` through tap `δ` whenever `p = o·s + δ − pad`.
pub fn sparse_inverse_conv3d(
    coarse: &SparseVoxelTensor,
    target_coords: &[[u32; 3]],
    target_grid: [u32; 3],
    w: &SparseConvWeights,
) -> Result<SparseVoxelTensor> {
    w.expect(ConvMode::Inverse, coarse.channels())?;
    if target_coords.is_empty() {
        return Ok(SparseVoxelTensor::empty(w.c_out(), target_grid));
    }
    let index = CoordIndex::from_coords(coarse.coords())?;
    let s = w.stride.map(i64::from);
    let pad = w.padding();
    let mut rules = vec![Vec::new(); w.kernel.len()];
    for (tap, d) in w.taps() {
        for (o, p) in target_coords.iter().enumerate() {
            let mut q = [0i64; 3];
            let mut aligned = true;
            for a in 0..3 {
                let num = p[a] as i64 + pad[a] - d[a];
                if num < 0 || num % s[a] != 0 {
                    aligned = false;
                    break;
                }
                q[a] = num / s[a];
            }
            if !aligned {
                continue;
            }
            if let Some(i) = index.get_signed(q) {
                rules[tap].push((o, i));
            }
        }
    }
    let features = apply_rules(coarse.features(), w, target_coords.len(), rules);
    SparseVoxelTensor::new(target_coords.to_vec(), features, target_grid)
}
