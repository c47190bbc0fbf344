//! Point-cloud voxelization, the sparse voxel tensor and BEV scatter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Points with `3 + extra_features` floats per row: x, y, z in meters, then features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    extra_features: usize,
    data: Vec<f32>,
}

impl PointCloud {
    pub fn new(extra_features: usize, data: Vec<f32>) -> Result<Self> {
        let stride = 3 + extra_features;
        if !data.len().is_multiple_of(stride) {
            return Err(Error::ShapeMismatch(format!(
                "point buffer length {} is not a multiple of row width {stride}",
                data.len()
            )));
        }
        if let Some(i) = data
            .chunks(stride)
            .position(|p| p[..3].iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidTensor(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            extra_features,
            data,
        })
    }

    pub fn empty(extra_features: usize) -> Self {
        Self {
            extra_features,
            data: Vec::new(),
        }
    }

    pub fn extra_features(&self) -> usize {
        self.extra_features
    }

    pub fn len(&self) -> usize {
        self.data.len() / (3 + self.extra_features)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        let s = 3 + self.extra_features;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(3 + self.extra_features)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelizationConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub grid_shape: [u32; 3],
}

impl VoxelizationConfig {
    /// Derives `grid_shape` from the range and voxel size.
    pub fn new(range_min: [f64; 3], range_max: [f64; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let mut grid_shape = [0u32; 3];
        for d in 0..3 {
            if !(voxel_size[d] > 0.0) || !voxel_size[d].is_finite() {
                return Err(Error::config("voxel_size", "components must be positive"));
            }
            let extent = range_max[d] - range_min[d];
            if !(extent > 0.0) || !extent.is_finite() {
                return Err(Error::config("range", "range_max must exceed range_min"));
            }
            // 108 / 0.3 is 360.00000000000006 in binary floating point
            grid_shape[d] = (extent / voxel_size[d] - 1e-9).ceil() as u32;
        }
        Ok(Self {
            range_min,
            range_max,
            voxel_size,
            grid_shape,
        })
    }

    /// nuScenes voxelization: range [-54, 54]² × [-5, 3] m at 0.3 × 0.3 × 0.25 m.
    pub fn nuscenes() -> Self {
        Self::new([-54.0, -54.0, -5.0], [54.0, 54.0, 3.0], [0.3, 0.3, 0.25])
            .expect("nuScenes config is valid")
    }

    /// Cell index of a point, or `None` if it falls outside `[range_min, range_max)`.
    pub fn cell_of(&self, p: &[f32]) -> Option<[u32; 3]> {
        let mut cell = [0u32; 3];
        for d in 0..3 {
            let v = p[d] as f64;
            if v < self.range_min[d] || v >= self.range_max[d] {
                return None;
            }
            let i = ((v - self.range_min[d]) / self.voxel_size[d]).floor() as u32;
            cell[d] = i.min(self.grid_shape[d] - 1);
        }
        Some(cell)
    }
}

/// Unique integer voxel coordinates paired with an `N × C` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelTensor {
    coords: Vec<[u32; 3]>,
    features: Matrix,
    grid_shape: [u32; 3],
}

impl SparseVoxelTensor {
    /// Validates distinctness, bounds and row counts.
    pub fn new(coords: Vec<[u32; 3]>, features: Matrix, grid_shape: [u32; 3]) -> Result<Self> {
        if coords.len() != features.rows() {
            return Err(Error::InvalidTensor(format!(
                "{} coordinate rows but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        for c in &coords {
            if (0..3).any(|d| c[d] >= grid_shape[d]) {
                return Err(Error::InvalidTensor(format!(
                    "coordinate {c:?} outside grid {grid_shape:?}"
                )));
            }
        }
        CoordIndex::from_coords(&coords)?;
        Ok(Self {
            coords,
            features,
            grid_shape,
        })
    }

    /// Skips validation. Callers must uphold the invariants.
    pub(crate) fn from_parts_unchecked(
        coords: Vec<[u32; 3]>,
        features: Matrix,
        grid_shape: [u32; 3],
    ) -> Self {
        debug_assert_eq!(coords.len(), features.rows());
        Self {
            coords,
            features,
            grid_shape,
        }
    }

    pub fn empty(channels: usize, grid_shape: [u32; 3]) -> Self {
        Self {
            coords: Vec::new(),
            features: Matrix::zeros(0, channels),
            grid_shape,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn grid_shape(&self) -> [u32; 3] {
        self.grid_shape
    }

    /// Same coordinates, new features.
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows for {} voxels",
                features.rows(),
                self.coords.len()
            )));
        }
        Ok(Self {
            coords: self.coords.clone(),
            features,
            grid_shape: self.grid_shape,
        })
    }

    /// Applies a row permutation: output row `k` is input row `perm[k]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            features: self.features.gather_rows(perm),
            grid_shape: self.grid_shape,
        }
    }

    /// Rows sorted ascending by `(i_z, i_y, i_x)`.
    pub fn canonicalized(&self) -> Self {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.sort_by_key(|&i| {
            let c = self.coords[i];
            (c[2], c[1], c[0])
        });
        self.permute_rows(&perm)
    }
}

/// Hash index from coordinate to row.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    map: HashMap<[u32; 3], usize>,
}

impl CoordIndex {
    pub fn from_coords(coords: &[[u32; 3]]) -> Result<Self> {
        let mut map = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            if map.insert(c, row).is_some() {
                return Err(Error::DuplicateCoordinate(c));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, coord: [u32; 3]) -> Option<usize> {
        self.map.get(&coord).copied()
    }

    /// Lookup with signed coordinates; negative components are misses.
    pub fn get_signed(&self, coord: [i64; 3]) -> Option<usize> {
        if coord.iter().any(|&v| v < 0 || v > u32::MAX as i64) {
            return None;
        }
        self.get([coord[0] as u32, coord[1] as u32, coord[2] as u32])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn build_index(t: &SparseVoxelTensor) -> Result<CoordIndex> {
    CoordIndex::from_coords(t.coords())
}

/// Mean of (offset from cell center ⊕ point features) per occupied cell.
///
/// Output rows are in canonical `(i_z, i_y, i_x)` order with `3 + F` channels.
pub fn voxelize(cloud: &PointCloud, cfg: &VoxelizationConfig) -> SparseVoxelTensor {
    let width = 3 + cloud.extra_features();
    let mut cells: HashMap<[u32; 3], (Vec<f64>, usize)> = HashMap::new();
    for p in cloud.iter() {
        let Some(cell) = cfg.cell_of(p) else { continue };
        let entry = cells.entry(cell).or_insert_with(|| (vec![0.0; width], 0));
        for d in 0..3 {
            let center = cfg.range_min[d] + (cell[d] as f64 + 0.5) * cfg.voxel_size[d];
            entry.0[d] += p[d] as f64 - center;
        }
        for (acc, &f) in entry.0[3..].iter_mut().zip(&p[3..]) {
            *acc += f as f64;
        }
        entry.1 += 1;
    }

    let mut occupied: Vec<([u32; 3], Vec<f64>, usize)> =
        cells.into_iter().map(|(c, (s, n))| (c, s, n)).collect();
    occupied.sort_by_key(|(c, _, _)| (c[2], c[1], c[0]));

    let mut coords = Vec::with_capacity(occupied.len());
    let mut feats = Vec::with_capacity(occupied.len() * width);
    for (c, sum, n) in occupied {
        coords.push(c);
        feats.extend(sum.iter().map(|s| (s / n as f64) as f32));
    }
    let features = Matrix::from_vec(coords.len(), width, feats);
    SparseVoxelTensor::from_parts_unchecked(coords, features, cfg.grid_shape)
}

/// Dense bird's-eye-view map of shape `(X, Y, C)`, row-major in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMap {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl BevMap {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let c = self.shape[2];
        let o = (x * self.shape[1] + y) * c;
        &self.data[o..o + c]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let c = self.shape[2];
        let o = (x * self.shape[1] + y) * c;
        &mut self.data[o..o + c]
    }

    /// Columns whose feature vector is not all zero.
    pub fn nonzero_columns(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for x in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                if self.cell(x, y).iter().any(|&v| v != 0.0) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Sums features over z into each `(i_x, i_y)` column.
pub fn bev_scatter(t: &SparseVoxelTensor) -> BevMap {
    let g = t.grid_shape();
    let mut map = BevMap::zeros([g[0] as usize, g[1] as usize, t.channels()]);
    for (row, c) in t.coords().iter().enumerate() {
        let dst = map.cell_mut(c[0] as usize, c[1] as usize);
        for (d, &v) in dst.iter_mut().zip(t.features().row(row)) {
            *d += v;
        }
    }
    map
}
