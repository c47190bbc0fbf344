//! Parameter sets to and from the `MLP1` tensor container.

use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::block::{BlockConfig, BlockParams, EncoderKind, GroupEncoder, Mixer};
use crate::container::{write_atomic, TensorStore};
use crate::error::{Error, Result};
use crate::sparseconv::{ConvMode, SparseConvWeights};
use crate::ssm::{MambaConfig, MambaLayer, MambaLayerParams};

pub fn put_mamba_params(store: &mut TensorStore, prefix: &str, p: &MambaLayerParams) {
    store.put_linear(&format!("{prefix}.in_proj"), &p.in_proj);
    store.put_matrix(format!("{prefix}.conv.weight"), &p.conv_weight);
    store.put_vec(format!("{prefix}.conv.bias"), &p.conv_bias);
    store.put_linear(&format!("{prefix}.x_proj"), &p.x_proj);
    store.put_linear(&format!("{prefix}.dt_proj"), &p.dt_proj);
    store.put_matrix(format!("{prefix}.a_log"), &p.a_log);
    store.put_vec(format!("{prefix}.skip"), &p.skip);
    store.put_linear(&format!("{prefix}.out_proj"), &p.out_proj);
}

pub fn mamba_params(
    store: &TensorStore,
    prefix: &str,
    cfg: MambaConfig,
) -> Result<MambaLayerParams> {
    let (d, di, ds) = (cfg.d_model, cfg.d_inner(), cfg.d_state);
    let p = MambaLayerParams {
        cfg,
        in_proj: store.linear(&format!("{prefix}.in_proj"), d, 2 * di)?,
        conv_weight: store.matrix(&format!("{prefix}.conv.weight"), di, cfg.conv_width)?,
        conv_bias: store.vector(&format!("{prefix}.conv.bias"), di)?,
        x_proj: store.linear(&format!("{prefix}.x_proj"), di, cfg.dt_rank + 2 * ds)?,
        dt_proj: store.linear(&format!("{prefix}.dt_proj"), cfg.dt_rank, di)?,
        a_log: store.matrix(&format!("{prefix}.a_log"), di, ds)?,
        skip: store.vector(&format!("{prefix}.skip"), di)?,
        out_proj: store.linear(&format!("{prefix}.out_proj"), di, d)?,
    };
    p.validate()?;
    Ok(p)
}

pub fn put_conv(store: &mut TensorStore, prefix: &str, w: &SparseConvWeights) {
    for (i, m) in w.kernel.iter().enumerate() {
        store.put_matrix(format!("{prefix}.tap{i:03}"), m);
    }
    store.put_vec(format!("{prefix}.bias"), &w.bias);
}

pub fn conv(
    store: &TensorStore,
    prefix: &str,
    kernel_size: [u32; 3],
    stride: [u32; 3],
    mode: ConvMode,
    c_in: usize,
    c_out: usize,
) -> Result<SparseConvWeights> {
    let taps = kernel_size.iter().product::<u32>() as usize;
    let kernel = (0..taps)
        .map(|i| store.matrix(&format!("{prefix}.tap{i:03}"), c_in, c_out))
        .collect::<Result<Vec<_>>>()?;
    SparseConvWeights::new(
        kernel_size,
        stride,
        mode,
        kernel,
        store.vector(&format!("{prefix}.bias"), c_out)?,
    )
}

fn put_mixer(store: &mut TensorStore, prefix: &str, m: &Mixer) -> Result<()> {
    match m {
        Mixer::Mamba(MambaLayer::Unidirectional(p)) => {
            put_mamba_params(store, &format!("{prefix}.fwd"), p)
        }
        Mixer::Mamba(MambaLayer::Bidirectional { fwd, bwd }) => {
            put_mamba_params(store, &format!("{prefix}.fwd"), fwd);
            put_mamba_params(store, &format!("{prefix}.bwd"), bwd);
        }
        Mixer::Identity => {
            return Err(Error::config(
                prefix,
                "identity test layers are not serializable",
            ));
        }
    }
    Ok(())
}

fn mixer(
    store: &TensorStore,
    prefix: &str,
    cfg: MambaConfig,
    bidirectional: bool,
) -> Result<Mixer> {
    let fwd = mamba_params(store, &format!("{prefix}.fwd"), cfg)?;
    Ok(Mixer::Mamba(if bidirectional {
        MambaLayer::Bidirectional {
            fwd,
            bwd: mamba_params(store, &format!("{prefix}.bwd"), cfg)?,
        }
    } else {
        MambaLayer::Unidirectional(fwd)
    }))
}

pub fn put_block(store: &mut TensorStore, prefix: &str, b: &BlockParams) -> Result<()> {
    put_conv(store, &format!("{prefix}.slm"), &b.slm);
    for (m, e) in b.encoders.iter().enumerate() {
        put_mixer(store, &format!("{prefix}.group{m}.first"), &e.first)?;
        put_mixer(store, &format!("{prefix}.group{m}.second"), &e.second)?;
    }
    store.put_layer_norm(&format!("{prefix}.norm_a"), &b.norm_a);
    store.put_linear(&format!("{prefix}.ffn_in"), &b.ffn_in);
    store.put_linear(&format!("{prefix}.ffn_out"), &b.ffn_out);
    store.put_layer_norm(&format!("{prefix}.norm_b"), &b.norm_b);
    Ok(())
}

pub fn block(store: &TensorStore, prefix: &str, cfg: BlockConfig) -> Result<BlockParams> {
    cfg.validate()?;
    let c = cfg.channels;
    let mcfg = cfg.mamba_config();
    let encoders = (0..cfg.groups)
        .map(|m| {
            Ok(GroupEncoder {
                kind: if m < cfg.global_groups {
                    EncoderKind::Global
                } else {
                    EncoderKind::Local
                },
                first: mixer(
                    store,
                    &format!("{prefix}.group{m}.first"),
                    mcfg,
                    cfg.bidirectional,
                )?,
                second: mixer(
                    store,
                    &format!("{prefix}.group{m}.second"),
                    mcfg,
                    cfg.bidirectional,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockParams {
        slm: conv(
            store,
            &format!("{prefix}.slm"),
            cfg.slm_kernel,
            [1, 1, 1],
            ConvMode::Submanifold,
            c,
            c,
        )?,
        encoders,
        norm_a: store.layer_norm(&format!("{prefix}.norm_a"), c)?,
        ffn_in: store.linear(&format!("{prefix}.ffn_in"), c, cfg.ffn_hidden)?,
        ffn_out: store.linear(&format!("{prefix}.ffn_out"), cfg.ffn_hidden, c)?,
        norm_b: store.layer_norm(&format!("{prefix}.norm_b"), c)?,
        cfg,
    })
}

pub fn backbone_to_store(p: &BackboneParams) -> Result<TensorStore> {
    let mut store = TensorStore::new();
    for (s, blocks) in p.encoder.iter().enumerate() {
        for (b, blk) in blocks.iter().enumerate() {
            put_block(&mut store, &format!("enc.{s}.{b}"), blk)?;
        }
        if let Some(w) = &p.downsample[s] {
            put_conv(&mut store, &format!("down.{s}"), w);
        }
        if let Some(w) = &p.upsample[s] {
            put_conv(&mut store, &format!("up.{s}"), w);
        }
    }
    for (s, blk) in p.decoder.iter().enumerate() {
        put_block(&mut store, &format!("dec.{s}"), blk)?;
    }
    Ok(store)
}

/// Rebuilds backbone parameters for `cfg`; every tensor must be present with its expected shape.
pub fn backbone_from_store(store: &TensorStore, cfg: &BackboneConfig) -> Result<BackboneParams> {
    cfg.validate()?;
    let c = cfg.channels;
    let n = cfg.stages();
    let mut encoder = Vec::with_capacity(n);
    let mut downsample = Vec::with_capacity(n);
    let mut upsample = Vec::with_capacity(n);
    for s in 0..n {
        encoder.push(
            (0..cfg.blocks_per_stage)
                .map(|b| block(store, &format!("enc.{s}.{b}"), cfg.block_config(s)))
                .collect::<Result<Vec<_>>>()?,
        );
        let k = [cfg.strides[s]; 3];
        if cfg.strides[s] > 1 {
            downsample.push(Some(conv(
                store,
                &format!("down.{s}"),
                k,
                k,
                ConvMode::Strided,
                c,
                c,
            )?));
            upsample.push(Some(conv(
                store,
                &format!("up.{s}"),
                k,
                k,
                ConvMode::Inverse,
                c,
                c,
            )?));
        } else {
            downsample.push(None);
            upsample.push(None);
        }
    }
    let decoder = (0..n - 1)
        .map(|s| block(store, &format!("dec.{s}"), cfg.block_config(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BackboneParams {
        cfg: cfg.clone(),
        encoder,
        downsample,
        upsample,
        decoder,
    })
}

pub fn save_backbone(path: &Path, p: &BackboneParams) -> Result<()> {
    let store = backbone_to_store(p)?;
    write_atomic(path, |w| store.write(w))
}

pub fn load_backbone(path: &Path, cfg: &BackboneConfig) -> Result<BackboneParams> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    backbone_from_store(&TensorStore::read(f)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneParams;

    #[test]
    fn backbone_params_round_trip_through_container() {
        let cfg = BackboneConfig {
            strides: vec![1, 2],
            channels: 8,
            groups: 2,
            global_groups: 1,
            window_xy: [4, 4],
            window_z_list: vec![4, 2],
            group_size: 16,
            ffn_hidden: 12,
            d_state: 3,
            ..BackboneConfig::default()
        };
        let p = BackboneParams::init(&cfg).unwrap();
        let store = backbone_to_store(&p).unwrap();
        let mut buf = Vec::new();
        store.write(&mut buf).unwrap();
        let back = backbone_from_store(&TensorStore::read(&buf[..]).unwrap(), &cfg).unwrap();
        assert_eq!(back, p);

        let other = BackboneConfig {
            channels: 16,
            ..cfg
        };
        assert!(backbone_from_store(&store, &other).is_err());
    }
}
