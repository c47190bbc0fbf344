//! The UniMamba block: submanifold locality embedding, then channel groups
//! encoded globally (whole-scene sequence) or locally (windowed, equal-length
//! groups) over complementary Z-order, then a LayerNorm/FFN tail.

use rand::Rng;
use rayon::prelude::*;

use crate::curves::{default_bits, order_coords, window_partition, Curve};
use crate::error::{Error, Result};
use crate::sparseconv::{submanifold_conv3d, ConvMode, SparseConvWeights};
use crate::ssm::{Identity, MambaConfig, MambaLayer, SequenceLayer};
use crate::tensor::{relu, LayerNorm, Linear, Matrix};
use crate::voxelgrid::SparseVoxelTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    /// Channel groups `M`.
    pub groups: usize,
    /// The first `J` groups use the global encoder, the rest the local one.
    pub global_groups: usize,
    pub window_size: [u32; 3],
    pub group_size: usize,
    pub ffn_hidden: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub bidirectional: bool,
    pub slm_kernel: [u32; 3],
}

impl BlockConfig {
    /// `M = 4`, `J = 2`, window `[13, 13, 32]`, `L = 1024`, FFN `2C`.
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            groups: 4,
            global_groups: 2,
            window_size: [13, 13, 32],
            group_size: 1024,
            ffn_hidden: 2 * channels,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            bidirectional: true,
            slm_kernel: [3, 3, 3],
        }
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::config(
                "groups",
                format!(
                    "channels {} not divisible into {} groups",
                    self.channels, self.groups
                ),
            ));
        }
        if self.global_groups > self.groups {
            return Err(Error::config("global_groups", "must not exceed groups"));
        }
        if self.window_size.contains(&0) {
            return Err(Error::config("window_size", "components must be positive"));
        }
        if self.group_size == 0 {
            return Err(Error::config("group_size", "must be positive"));
        }
        if self.ffn_hidden == 0 || self.d_state == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(Error::config("ffn_hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn mamba_config(&self) -> MambaConfig {
        let d = self.group_width();
        MambaConfig {
            d_model: d,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            dt_rank: d.div_ceil(16),
        }
    }
}

/// A sequence layer slot inside an encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Mamba(MambaLayer),
    Identity,
}

impl SequenceLayer for Mixer {
    fn forward(&self, seq: &Matrix) -> Matrix {
        match self {
            Mixer::Mamba(m) => m.forward(seq),
            Mixer::Identity => Identity.forward(seq),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Global,
    Local,
}

/// Two cascaded sequence layers: X-primary order then Y-primary order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEncoder {
    pub kind: EncoderKind,
    pub first: Mixer,
    pub second: Mixer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub cfg: BlockConfig,
    pub slm: SparseConvWeights,
    pub encoders: Vec<GroupEncoder>,
    pub norm_a: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_b: LayerNorm,
}

impl BlockParams {
    pub fn init<R: Rng>(cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let slm =
            SparseConvWeights::init(cfg.slm_kernel, [1, 1, 1], ConvMode::Submanifold, c, c, rng);
        slm.validate()?;
        let mcfg = cfg.mamba_config();
        let encoders = (0..cfg.groups)
            .map(|m| GroupEncoder {
                kind: if m < cfg.global_groups {
                    EncoderKind::Global
                } else {
                    EncoderKind::Local
                },
                first: Mixer::Mamba(MambaLayer::init(mcfg, cfg.bidirectional, rng)),
                second: Mixer::Mamba(MambaLayer::init(mcfg, cfg.bidirectional, rng)),
            })
            .collect();
        Ok(Self {
            slm,
            encoders,
            norm_a: LayerNorm::new(c),
            ffn_in: Linear::init(c, cfg.ffn_hidden, rng),
            ffn_out: Linear::init(cfg.ffn_hidden, c, rng),
            norm_b: LayerNorm::new(c),
            cfg,
        })
    }

    /// Replaces every sequence layer with the identity.
    pub fn with_identity_encoders(mut self) -> Self {
        for e in &mut self.encoders {
            e.first = Mixer::Identity;
            e.second = Mixer::Identity;
        }
        self
    }
}

/// Global encoder over one channel slice; rows return in the caller's order.
pub fn gse_forward(
    t: &SparseVoxelTensor,
    first: &dyn SequenceLayer,
    second: &dyn SequenceLayer,
) -> Result<Matrix> {
    let bits = default_bits(t.grid_shape());
    let order_x = order_coords(t.coords(), Curve::ZOrderX, bits)?;
    let f_x = t.features().gather_rows(&order_x.perm);
    let c_x: Vec<[u32; 3]> = order_x.perm.iter().map(|&i| t.coords()[i]).collect();
    let f_x_out = first.forward(&f_x);

    // Y order over the already X-permuted sequence
    let order_y = order_coords(&c_x, Curve::ZOrderY, bits)?;
    let f_y = f_x_out.gather_rows(&order_y.perm);
    let f_g = second.forward(&f_y);

    let composed: Vec<usize> = order_y.perm.iter().map(|&k| order_x.perm[k]).collect();
    Ok(f_g.scatter_rows(&composed))
}

fn run_groups(features: &Matrix, groups: &[Vec<usize>], layer: &dyn SequenceLayer) -> Matrix {
    let outs: Vec<Matrix> = groups
        .par_iter()
        .map(|g| layer.forward(&features.gather_rows(g)))
        .collect();
    let mut result = Matrix::zeros(features.rows(), features.cols());
    for (g, out) in groups.iter().zip(&outs) {
        for (k, &row) in g.iter().enumerate() {
            result.row_mut(row).copy_from_slice(out.row(k));
        }
    }
    result
}

/// Local encoder: windowed X-primary groups, then windowed Y-primary groups.
pub fn lse_forward(
    t: &SparseVoxelTensor,
    window_size: [u32; 3],
    group_size: usize,
    first: &dyn SequenceLayer,
    second: &dyn SequenceLayer,
) -> Result<Matrix> {
    let (part_x, _) = window_partition(t, window_size, group_size, Curve::ZOrderX)?;
    let h = run_groups(t.features(), &part_x.groups, first);
    let (part_y, _) = window_partition(t, window_size, group_size, Curve::ZOrderY)?;
    Ok(run_groups(&h, &part_y.groups, second))
}

/// Concatenation of the per-group encoder outputs.
pub fn aggregate_groups(t: &SparseVoxelTensor, p: &BlockParams) -> Result<Matrix> {
    let cfg = &p.cfg;
    cfg.validate()?;
    if t.channels() != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "tensor has {} channels, block expects {}",
            t.channels(),
            cfg.channels
        )));
    }
    if p.encoders.len() != cfg.groups {
        return Err(Error::ShapeMismatch(
            "encoder count differs from groups".into(),
        ));
    }
    let width = cfg.group_width();
    let slices: Vec<Matrix> = p
        .encoders
        .par_iter()
        .enumerate()
        .map(|(m, enc)| {
            let slice = t.with_features(t.features().column_slice(m * width, width))?;
            match enc.kind {
                EncoderKind::Global => gse_forward(&slice, &enc.first, &enc.second),
                EncoderKind::Local => lse_forward(
                    &slice,
                    cfg.window_size,
                    cfg.group_size,
                    &enc.first,
                    &enc.second,
                ),
            }
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::hconcat(&slices))
}

/// `F_B = LN(F_A) + F_A`, `out = LN(FFN(F_B) + F_B)`.
pub fn lgsa_tail(f_a: &Matrix, p: &BlockParams) -> Matrix {
    let mut f_b = p.norm_a.forward(f_a);
    f_b.add_assign(f_a);
    let mut ffn = p.ffn_out.forward(&p.ffn_in.forward(&f_b).map(relu));
    ffn.add_assign(&f_b);
    p.norm_b.forward(&ffn)
}

pub fn lgsa_forward(t: &SparseVoxelTensor, p: &BlockParams) -> Result<SparseVoxelTensor> {
    if t.is_empty() {
        return Ok(t.clone());
    }
    let f_a = aggregate_groups(t, p)?;
    t.with_features(lgsa_tail(&f_a, p))
}

pub fn unimamba_block_forward(t: &SparseVoxelTensor, p: &BlockParams) -> Result<SparseVoxelTensor> {
    let local = submanifold_conv3d(t, &p.slm)?;
    lgsa_forward(&local, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(channels: usize, groups: usize, global: usize) -> BlockConfig {
        BlockConfig {
            channels,
            groups,
            global_groups: global,
            window_size: [4, 4, 4],
            group_size: 16,
            ffn_hidden: 2 * channels,
            d_state: 4,
            expand: 2,
            conv_width: 3,
            bidirectional: true,
            slm_kernel: [3, 3, 3],
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, grid: u32) -> SparseVoxelTensor {
        let mut coords: Vec<[u32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0..grid),
                    rng.gen_range(0..grid),
                    rng.gen_range(0..grid),
                ]
            })
            .collect();
        coords.sort();
        coords.dedup();
        let f = Matrix::uniform(coords.len(), c, 1.0, rng);
        SparseVoxelTensor::new(coords, f, [grid; 3]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(small_cfg(8, 3, 1).validate().is_err());
        assert!(small_cfg(8, 4, 5).validate().is_err());
        small_cfg(8, 4, 2).validate().unwrap();
    }

    #[test]
    fn identity_encoders_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 80, 3, 10);
        let g = gse_forward(&t, &Identity, &Identity).unwrap();
        assert_eq!(&g, t.features());
        let l = lse_forward(&t, [4, 4, 4], 7, &Identity, &Identity).unwrap();
        assert_eq!(&l, t.features());
    }

    #[test]
    fn single_voxel_gse_is_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, 1, 4, 4);
        let cfg = MambaConfig {
            d_model: 4,
            d_state: 4,
            expand: 2,
            conv_width: 3,
            dt_rank: 1,
        };
        let a = MambaLayer::init(cfg, true, &mut rng);
        let b = MambaLayer::init(cfg, true, &mut rng);
        let out = gse_forward(&t, &a, &b).unwrap();
        assert_eq!(out, b.forward(&a.forward(t.features())));
    }

    #[test]
    fn zeroed_slice_stays_zero_with_identity_encoders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 40, 8, 8);
        let mut f = t.features().clone();
        for r in 0..f.rows() {
            f.row_mut(r)[2..4].fill(0.0);
        }
        let t = t.with_features(f).unwrap();
        let p = BlockParams::init(small_cfg(8, 4, 2), &mut rng)
            .unwrap()
            .with_identity_encoders();
        let f_a = aggregate_groups(&t, &p).unwrap();
        assert_eq!(&f_a, t.features());
    }

    #[test]
    fn block_preserves_coordinates_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, 60, 8, 8);
        let p = BlockParams::init(small_cfg(8, 4, 2), &mut rng).unwrap();
        let out = unimamba_block_forward(&t, &p).unwrap();
        assert_eq!(out.coords(), t.coords());
        assert_eq!(out.channels(), 8);
        assert!(out.features().all_finite());
    }

    #[test]
    fn empty_block_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BlockParams::init(small_cfg(8, 4, 2), &mut rng).unwrap();
        let t = SparseVoxelTensor::empty(8, [8; 3]);
        assert!(unimamba_block_forward(&t, &p).unwrap().is_empty());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = BlockParams::init(small_cfg(8, 4, 2), &mut rng).unwrap();
        let t = random_tensor(&mut rng, 10, 4, 8);
        assert!(lgsa_forward(&t, &p).is_err());
    }
}
