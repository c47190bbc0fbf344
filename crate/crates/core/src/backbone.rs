//! Encoder-decoder stacking of UniMamba blocks, ending in a BEV map.
//!
//! Stage `s` first downsamples by `strides[s]` (stride-1 stages skip it), then
//! runs its blocks and records the result. The decoder walks back up: each
//! level upsamples onto the recorded coordinate set, adds the recorded tensor
//! and applies one block.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{unimamba_block_forward, BlockConfig, BlockParams};
use crate::error::{Error, Result};
use crate::sparseconv::{
    sparse_inverse_conv3d, strided_grid, strided_sparse_conv3d, ConvMode, SparseConvWeights,
};
use crate::tensor::Matrix;
use crate::voxelgrid::{bev_scatter, BevMap, CoordIndex, SparseVoxelTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub strides: Vec<u32>,
    pub blocks_per_stage: usize,
    pub channels: usize,
    pub groups: usize,
    pub global_groups: usize,
    pub window_xy: [u32; 2],
    /// z window per stage; may be longer than the stage count.
    pub window_z_list: Vec<u32>,
    pub group_size: usize,
    pub seed: u64,
    pub ffn_hidden: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub bidirectional: bool,
}

impl Default for BackboneConfig {
    /// The nuScenes backbone: strides {1, 2, 2}, C = 128, M = 4, J = 2,
    /// window 13 × 13 with z windows {32, 16, 8, 4, 2}, groups of 1024.
    fn default() -> Self {
        Self {
            strides: vec![1, 2, 2],
            blocks_per_stage: 1,
            channels: 128,
            groups: 4,
            global_groups: 2,
            window_xy: [13, 13],
            window_z_list: vec![32, 16, 8, 4, 2],
            group_size: 1024,
            seed: 0,
            ffn_hidden: 256,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            bidirectional: true,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let inner = value
        .trim()
        .trim_start_matches(['[', '{', '('])
        .trim_end_matches([']', '}', ')']);
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|s| {
            s.trim().parse::<T>().map_err(|_| {
                Error::config(key, format!("`{}` is not a valid list element", s.trim()))
            })
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse `{}`", value.trim())))
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.strides.len()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut ffn_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", i + 1),
                    "expected `key = value`",
                ));
            };
            let key = key.trim();
            match key {
                "strides" => cfg.strides = parse_list(key, value)?,
                "blocks_per_stage" => cfg.blocks_per_stage = parse_scalar(key, value)?,
                "channels" => cfg.channels = parse_scalar(key, value)?,
                "groups" => cfg.groups = parse_scalar(key, value)?,
                "global_groups" => cfg.global_groups = parse_scalar(key, value)?,
                "window_xy" => {
                    let v: Vec<u32> = parse_list(key, value)?;
                    cfg.window_xy = match v.as_slice() {
                        [x, y] => [*x, *y],
                        [s] => [*s, *s],
                        _ => return Err(Error::config(key, "expected one or two values")),
                    };
                }
                "window_z_list" => cfg.window_z_list = parse_list(key, value)?,
                "group_size" => cfg.group_size = parse_scalar(key, value)?,
                "seed" => cfg.seed = parse_scalar(key, value)?,
                "ffn_hidden" => {
                    cfg.ffn_hidden = parse_scalar(key, value)?;
                    ffn_set = true;
                }
                "d_state" => cfg.d_state = parse_scalar(key, value)?,
                "expand" => cfg.expand = parse_scalar(key, value)?,
                "conv_width" => cfg.conv_width = parse_scalar(key, value)?,
                "bidirectional" => cfg.bidirectional = parse_scalar(key, value)?,
                other => return Err(Error::config(other, "unknown key")),
            }
        }
        if !ffn_set {
            cfg.ffn_hidden = 2 * cfg.channels;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "strides = {}", join(&self.strides));
        let _ = writeln!(s, "blocks_per_stage = {}", self.blocks_per_stage);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "global_groups = {}", self.global_groups);
        let _ = writeln!(s, "window_xy = {}", join(&self.window_xy));
        let _ = writeln!(s, "window_z_list = {}", join(&self.window_z_list));
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "ffn_hidden = {}", self.ffn_hidden);
        let _ = writeln!(s, "d_state = {}", self.d_state);
        let _ = writeln!(s, "expand = {}", self.expand);
        let _ = writeln!(s, "conv_width = {}", self.conv_width);
        let _ = writeln!(s, "bidirectional = {}", self.bidirectional);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(Error::config("strides", "need at least one stage"));
        }
        if self.strides.contains(&0) {
            return Err(Error::config("strides", "strides must be positive"));
        }
        if self.window_z_list.len() < self.stages() {
            return Err(Error::config(
                "window_z_list",
                format!(
                    "{} entries for {} stages",
                    self.window_z_list.len(),
                    self.stages()
                ),
            ));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage", "must be at least 1"));
        }
        if self.window_xy.contains(&0) || self.window_z_list.contains(&0) {
            return Err(Error::config(
                "window_xy",
                "window extents must be positive",
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        for s in 0..self.stages() {
            self.block_config(s).validate()?;
        }
        Ok(())
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels,
            groups: self.groups,
            global_groups: self.global_groups,
            window_size: [
                self.window_xy[0],
                self.window_xy[1],
                self.window_z_list[stage],
            ],
            group_size: self.group_size,
            ffn_hidden: self.ffn_hidden,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            bidirectional: self.bidirectional,
            slm_kernel: [3, 3, 3],
        }
    }

    /// `ceil(grid / Π strides[..=stage])` componentwise.
    pub fn stage_grid(&self, grid: [u32; 3], stage: usize) -> [u32; 3] {
        self.strides[..=stage]
            .iter()
            .fold(grid, |g, &s| strided_grid(g, [s; 3]))
    }
}

/// FNV-1a, used to derive PRNG stream ids from parameter paths.
fn stream_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Counter-based generator for the parameter tensor named `label`.
pub fn param_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(label));
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    /// `encoder[s][b]`
    pub encoder: Vec<Vec<BlockParams>>,
    /// Present for stages with stride > 1.
    pub downsample: Vec<Option<SparseConvWeights>>,
    /// `upsample[s]` maps stage `s` back onto stage `s − 1`; present when stride > 1.
    pub upsample: Vec<Option<SparseConvWeights>>,
    /// One block per decoder level `0..stages − 1`.
    pub decoder: Vec<BlockParams>,
}

impl BackboneParams {
    pub fn init(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let n = cfg.stages();
        let mut encoder = Vec::with_capacity(n);
        let mut downsample = Vec::with_capacity(n);
        let mut upsample = Vec::with_capacity(n);
        for s in 0..n {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    BlockParams::init(
                        cfg.block_config(s),
                        &mut param_rng(cfg.seed, &format!("enc.{s}.{b}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
            let stride = cfg.strides[s];
            if stride > 1 {
                let k = [stride; 3];
                downsample.push(Some(SparseConvWeights::init(
                    k,
                    k,
                    ConvMode::Strided,
                    c,
                    c,
                    &mut param_rng(cfg.seed, &format!("down.{s}")),
                )));
                upsample.push(Some(SparseConvWeights::init(
                    k,
                    k,
                    ConvMode::Inverse,
                    c,
                    c,
                    &mut param_rng(cfg.seed, &format!("up.{s}")),
                )));
            } else {
                downsample.push(None);
                upsample.push(None);
            }
        }
        let decoder = (0..n - 1)
            .map(|s| {
                BlockParams::init(
                    cfg.block_config(s),
                    &mut param_rng(cfg.seed, &format!("dec.{s}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            downsample,
            upsample,
            decoder,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StageStats {
    pub name: String,
    pub voxels: usize,
    pub grid_shape: [u32; 3],
    pub feature_norm: f64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub bev: BevMap,
    /// Recorded encoder tensor per stage.
    pub encoder_stages: Vec<SparseVoxelTensor>,
    /// Decoder tensor per level (`stages − 1` entries; level 0 is full resolution).
    pub decoder_stages: Vec<SparseVoxelTensor>,
    pub stats: Vec<StageStats>,
}

impl BackboneOutput {
    /// The tensor that was scattered to BEV.
    pub fn final_tensor(&self) -> &SparseVoxelTensor {
        self.decoder_stages
            .first()
            .unwrap_or_else(|| self.encoder_stages.first().expect("at least one stage"))
    }
}

fn stats(name: String, t: &SparseVoxelTensor, started: Instant) -> StageStats {
    StageStats {
        name,
        voxels: t.len(),
        grid_shape: t.grid_shape(),
        feature_norm: t.features().frobenius_norm(),
        elapsed: started.elapsed(),
    }
}

/// Rows of `src` reordered to follow `coords`; both must hold the same set.
fn align_to(src: &SparseVoxelTensor, coords: &[[u32; 3]]) -> Result<Matrix> {
    let index = CoordIndex::from_coords(src.coords())?;
    let rows = coords
        .iter()
        .map(|c| {
            index
                .get(*c)
                .ok_or_else(|| Error::InvalidTensor(format!("decoder lost coordinate {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(src.features().gather_rows(&rows))
}

pub fn backbone_forward(t: &SparseVoxelTensor, p: &BackboneParams) -> Result<BackboneOutput> {
    let cfg = &p.cfg;
    cfg.validate()?;
    if t.channels() != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, backbone expects {}",
            t.channels(),
            cfg.channels
        )));
    }
    let n = cfg.stages();
    let mut encoder_stages = Vec::with_capacity(n);
    let mut stat_rows = Vec::new();

    let mut x = t.clone();
    for s in 0..n {
        let started = Instant::now();
        if let Some(w) = &p.downsample[s] {
            x = strided_sparse_conv3d(&x, w)?;
        }
        for block in &p.encoder[s] {
            x = unimamba_block_forward(&x, block)?;
        }
        stat_rows.push(stats(format!("encoder.{s}"), &x, started));
        encoder_stages.push(x.clone());
    }

    let mut decoder_stages: Vec<SparseVoxelTensor> = Vec::with_capacity(n.saturating_sub(1));
    let mut y = x;
    for s in (0..n - 1).rev() {
        let started = Instant::now();
        let skip = &encoder_stages[s];
        let mut feats = match &p.upsample[s + 1] {
            Some(w) => sparse_inverse_conv3d(&y, skip.coords(), skip.grid_shape(), w)?
                .features()
                .clone(),
            None => align_to(&y, skip.coords())?,
        };
        feats.add_assign(skip.features());
        y = unimamba_block_forward(&skip.with_features(feats)?, &p.decoder[s])?;
        stat_rows.push(stats(format!("decoder.{s}"), &y, started));
        decoder_stages.push(y.clone());
    }
    decoder_stages.reverse();

    let bev = bev_scatter(&y);
    Ok(BackboneOutput {
        bev,
        encoder_stages,
        decoder_stages,
        stats: stat_rows,
    })
}

/// `n` distinct cells sampled uniformly without replacement, features in `[-1, 1)`.
pub fn synthetic_scene(
    n: usize,
    grid: [u32; 3],
    channels: usize,
    seed: u64,
) -> Result<SparseVoxelTensor> {
    let cells = grid.iter().map(|&g| g as usize).product::<usize>();
    if n > cells {
        return Err(Error::config(
            "voxels",
            format!("cannot place {n} distinct voxels in {cells} cells"),
        ));
    }
    let mut rng = param_rng(seed, "synthetic");
    let coords: Vec<[u32; 3]> = index::sample(&mut rng, cells, n)
        .into_iter()
        .map(|i| {
            let x = i % grid[0] as usize;
            let y = (i / grid[0] as usize) % grid[1] as usize;
            let z = i / (grid[0] as usize * grid[1] as usize);
            [x as u32, y as u32, z as u32]
        })
        .collect();
    let data = (0..n * channels)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    SparseVoxelTensor::new(coords, Matrix::from_vec(n, channels, data), grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(strides: Vec<u32>) -> BackboneConfig {
        BackboneConfig {
            strides,
            channels: 8,
            groups: 2,
            global_groups: 1,
            window_xy: [4, 4],
            window_z_list: vec![8, 4, 2, 1],
            group_size: 32,
            ffn_hidden: 16,
            d_state: 4,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn default_matches_nuscenes_setup() {
        let c = BackboneConfig::default();
        assert_eq!(c.strides, vec![1, 2, 2]);
        assert_eq!(c.channels, 128);
        assert_eq!((c.groups, c.global_groups), (4, 2));
        assert_eq!(c.group_size, 1024);
        c.validate().unwrap();
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let c = tiny_cfg(vec![1, 2]);
        assert_eq!(BackboneConfig::parse(&c.to_text()).unwrap(), c);
        let err = BackboneConfig::parse("strides = 1,2\nwarp = 9\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "warp"));
        let err = BackboneConfig::parse("channels = 10\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "groups"));
        let err = BackboneConfig::parse("strides = {1, 2, 2, 2, 2, 2}").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "window_z_list"));
        let c =
            BackboneConfig::parse("# comment\nstrides = {1, 2}\nchannels = 64 # inline\n").unwrap();
        assert_eq!(c.strides, vec![1, 2]);
        assert_eq!(c.ffn_hidden, 128);
    }

    #[test]
    fn stage_grid_shape_law() {
        let c = BackboneConfig::default();
        assert_eq!(c.stage_grid([360, 360, 32], 0), [360, 360, 32]);
        assert_eq!(c.stage_grid([360, 360, 32], 1), [180, 180, 16]);
        assert_eq!(c.stage_grid([360, 360, 32], 2), [90, 90, 8]);
        assert_eq!(c.stage_grid([7, 7, 7], 2), [2, 2, 2]);
    }

    #[test]
    fn param_streams_are_independent_and_reproducible() {
        let a: u64 = param_rng(1, "enc.0.0").gen();
        let b: u64 = param_rng(1, "enc.0.0").gen();
        let c: u64 = param_rng(1, "enc.1.0").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_stage_is_block_plus_bev() {
        let cfg = tiny_cfg(vec![1]);
        let p = BackboneParams::init(&cfg).unwrap();
        let t = synthetic_scene(60, [8, 8, 8], 8, 3).unwrap();
        let out = backbone_forward(&t, &p).unwrap();
        let direct = unimamba_block_forward(&t, &p.encoder[0][0]).unwrap();
        assert_eq!(out.bev, bev_scatter(&direct));
        assert!(out.decoder_stages.is_empty());
    }

    #[test]
    fn decoder_levels_restore_encoder_coordinates() {
        let cfg = tiny_cfg(vec![1, 2, 2]);
        let p = BackboneParams::init(&cfg).unwrap();
        let t = synthetic_scene(150, [12, 12, 8], 8, 4).unwrap();
        let out = backbone_forward(&t, &p).unwrap();
        assert_eq!(out.encoder_stages.len(), 3);
        assert_eq!(out.decoder_stages.len(), 2);
        for (s, dec) in out.decoder_stages.iter().enumerate() {
            assert_eq!(dec.coords(), out.encoder_stages[s].coords());
            assert_eq!(dec.grid_shape(), cfg.stage_grid([12, 12, 8], s));
        }
        assert_eq!(out.encoder_stages[2].grid_shape(), [3, 3, 2]);
        assert_eq!(out.bev.shape, [12, 12, 8]);
    }

    #[test]
    fn stride_one_middle_stage_aligns_rows() {
        let cfg = tiny_cfg(vec![1, 1, 2]);
        let p = BackboneParams::init(&cfg).unwrap();
        let t = synthetic_scene(80, [8, 8, 8], 8, 5).unwrap();
        let out = backbone_forward(&t, &p).unwrap();
        assert_eq!(out.final_tensor().coords(), t.coords());
    }

    #[test]
    fn empty_input_gives_zero_map() {
        let cfg = tiny_cfg(vec![1, 2]);
        let p = BackboneParams::init(&cfg).unwrap();
        let t = SparseVoxelTensor::empty(8, [8, 8, 8]);
        let out = backbone_forward(&t, &p).unwrap();
        assert!(out.bev.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthetic_scene_rejects_overfull_grid() {
        assert!(synthetic_scene(9, [2, 2, 2], 1, 0).is_err());
        assert_eq!(synthetic_scene(8, [2, 2, 2], 1, 0).unwrap().len(), 8);
    }
}
