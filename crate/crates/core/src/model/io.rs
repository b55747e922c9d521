//! Binary model serialization.
//!
//! The format is deliberately simple and fully specified so any
//! implementation can read it back:
//!
//! ```text
//! magic            4 bytes   "QSWM"
//! version          u32 LE    currently 1
//! num_blocks       u32 LE
//! block kinds      u8 * num_blocks      0 = ssm, 1 = attn
//! d_model          u32 LE
//! d_state          u32 LE
//! d_conv           u32 LE
//! mlp_ratio        u32 LE
//! vocab_size       u32 LE
//! seed             u64 LE
//! outlier fraction f64 LE
//! outlier mult     f64 LE
//! num targets      u32 LE
//! target codes     u8 * num_targets     subtype codes
//! tensors          (ndim u32 LE, dims u32 LE * ndim, data f64 LE * numel)
//! ```
//!
//! Tensors appear in one fixed order: embedding; then per block in stack
//! order — SSM blocks write `norm_gain, in_proj, conv1d, x_proj, dt_proj,
//! dt_bias, a, out_proj`, attention blocks write `attn_norm_gain, qkv_proj,
//! o_proj, mlp_norm_gain, up_proj, down_proj` — then `final_norm_gain` and
//! `lm_head`. A reader therefore knows every expected shape from the header
//! alone and can (and does) reject any deviation, as well as non-finite
//! values and trailing bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{
    embedding_descriptor, lm_head_descriptor, BlockAux, BlockKind, LayerDescriptor, Model,
    ModelAux, ModelConfig, OutlierSpec, Subtype,
};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"QSWM";
const VERSION: u32 = 1;

// ── Writing ────────────────────────────────────────────────────────────────

/// Serializes `model` to `w` in the documented binary format.
pub fn save_model(model: &Model, w: &mut impl Write) -> Result<()> {
    let cfg = &model.config;
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, cfg.num_blocks as u32)?;
    for kind in &cfg.block_pattern {
        w.write_all(&[match kind {
            BlockKind::Ssm => 0u8,
            BlockKind::Attn => 1u8,
        }])?;
    }
    for v in [cfg.d_model, cfg.d_state, cfg.d_conv, cfg.mlp_ratio, cfg.vocab_size] {
        write_u32(w, v as u32)?;
    }
    w.write_all(&cfg.seed.to_le_bytes())?;
    w.write_all(&cfg.outliers.fraction_of_channels.to_le_bytes())?;
    w.write_all(&cfg.outliers.magnitude_multiplier.to_le_bytes())?;
    write_u32(w, cfg.outliers.target_subtypes.len() as u32)?;
    for s in &cfg.outliers.target_subtypes {
        w.write_all(&[s.code()])?;
    }

    for (_, tensor) in tensor_order(model)? {
        write_tensor(w, tensor)?;
    }
    Ok(())
}

/// Saves to a file path.
pub fn save_model_to_path(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    save_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Hex SHA-256 of the model's serialized bytes; two models with equal digests
/// are bit-identical (config and every parameter).
pub fn model_digest(model: &Model) -> Result<String> {
    let mut buf = Vec::new();
    save_model(model, &mut buf)?;
    Ok(crate::corpus::hex_sha256(&buf))
}

/// The canonical serialization order as `(name, tensor)` pairs.
fn tensor_order(model: &Model) -> Result<Vec<(String, &Tensor)>> {
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    out.push(("embedding".to_string(), model.weight_required(&embedding_descriptor())?));
    for (b, kind) in model.config.block_pattern.iter().enumerate() {
        let weight = |s: Subtype| model.weight_required(&LayerDescriptor::new(b, s));
        match (kind, &model.aux().blocks[b]) {
            (BlockKind::Ssm, BlockAux::Ssm { norm_gain, a, dt_bias }) => {
                out.push((format!("block{b}.norm_gain"), norm_gain));
                out.push((format!("block{b}.in_proj"), weight(Subtype::MambaInProj)?));
                out.push((format!("block{b}.conv1d"), weight(Subtype::MambaConv1d)?));
                out.push((format!("block{b}.x_proj"), weight(Subtype::MambaXProj)?));
                out.push((format!("block{b}.dt_proj"), weight(Subtype::MambaDtProj)?));
                out.push((format!("block{b}.dt_bias"), dt_bias));
                out.push((format!("block{b}.a"), a));
                out.push((format!("block{b}.out_proj"), weight(Subtype::MambaOutProj)?));
            }
            (BlockKind::Attn, BlockAux::Attn { attn_norm_gain, mlp_norm_gain }) => {
                out.push((format!("block{b}.attn_norm_gain"), attn_norm_gain));
                out.push((format!("block{b}.qkv_proj"), weight(Subtype::AttnQkvProj)?));
                out.push((format!("block{b}.o_proj"), weight(Subtype::AttnOProj)?));
                out.push((format!("block{b}.mlp_norm_gain"), mlp_norm_gain));
                out.push((format!("block{b}.up_proj"), weight(Subtype::MlpUpProj)?));
                out.push((format!("block{b}.down_proj"), weight(Subtype::MlpDownProj)?));
            }
            _ => {
                return Err(Error::malformed(
                    "model",
                    format!("block {b} kind disagrees with its auxiliary parameters"),
                ))
            }
        }
    }
    out.push(("final_norm_gain".to_string(), &model.aux().final_norm_gain));
    out.push(("lm_head".to_string(), model.weight_required(&lm_head_descriptor(&model.config))?));
    Ok(out)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

// ── Reading ────────────────────────────────────────────────────────────────

/// Deserializes a model, validating magic, version, configuration, every
/// tensor shape, finiteness of all values, and the absence of trailing bytes.
pub fn load_model(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::malformed("model file", format!("bad magic {magic:02x?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::malformed(
            "model file",
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }

    let num_blocks = read_u32(r)? as usize;
    let mut block_pattern = Vec::with_capacity(num_blocks);
    for i in 0..num_blocks {
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        block_pattern.push(match code[0] {
            0 => BlockKind::Ssm,
            1 => BlockKind::Attn,
            c => return Err(Error::malformed("model file", format!("block {i} kind code {c}"))),
        });
    }
    let d_model = read_u32(r)? as usize;
    let d_state = read_u32(r)? as usize;
    let d_conv = read_u32(r)? as usize;
    let mlp_ratio = read_u32(r)? as usize;
    let vocab_size = read_u32(r)? as usize;
    let mut seed_bytes = [0u8; 8];
    r.read_exact(&mut seed_bytes)?;
    let seed = u64::from_le_bytes(seed_bytes);
    let fraction_of_channels = read_f64(r)?;
    let magnitude_multiplier = read_f64(r)?;
    let num_targets = read_u32(r)? as usize;
    let mut target_subtypes = BTreeSet::new();
    for _ in 0..num_targets {
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let subtype = Subtype::from_code(code[0]).ok_or_else(|| {
            Error::malformed("model file", format!("unknown subtype code {}", code[0]))
        })?;
        target_subtypes.insert(subtype);
    }

    let config = ModelConfig {
        num_blocks,
        block_pattern,
        d_model,
        d_state,
        d_conv,
        mlp_ratio,
        vocab_size,
        seed,
        outliers: OutlierSpec { fraction_of_channels, magnitude_multiplier, target_subtypes },
    };
    config.validate()?;

    let d = config.d_model;
    let d_inner = config.d_inner();
    let dt_rank = config.dt_rank();

    let mut weights: BTreeMap<LayerDescriptor, Arc<Tensor>> = BTreeMap::new();
    let read_named = |mut r: &mut dyn Read, name: &str, shape: Vec<usize>| -> Result<Tensor> {
        let t = read_tensor(&mut r, name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::malformed(
                "model file",
                format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    };

    let embedding = read_named(r, "embedding", vec![vocab_size, d])?;
    weights.insert(embedding_descriptor(), Arc::new(embedding));

    let mut blocks = Vec::with_capacity(num_blocks);
    for (b, kind) in config.block_pattern.clone().iter().enumerate() {
        match kind {
            BlockKind::Ssm => {
                let norm_gain = read_named(r, "norm_gain", vec![d])?;
                let in_proj = read_named(r, "in_proj", vec![2 * d_inner, d])?;
                let conv1d = read_named(r, "conv1d", vec![d_inner, d_conv])?;
                let x_proj = read_named(r, "x_proj", vec![dt_rank + 2 * d_state, d_inner])?;
                let dt_proj = read_named(r, "dt_proj", vec![d_inner, dt_rank])?;
                let dt_bias = read_named(r, "dt_bias", vec![d_inner])?;
                let a = read_named(r, "a", vec![d_inner, d_state])?;
                let out_proj = read_named(r, "out_proj", vec![d, d_inner])?;
                if a.data().iter().any(|&v| v >= 0.0) {
                    return Err(Error::malformed(
                        "model file",
                        format!("block {b} state matrix has a non-negative entry"),
                    ));
                }
                for (s, t) in [
                    (Subtype::MambaInProj, in_proj),
                    (Subtype::MambaConv1d, conv1d),
                    (Subtype::MambaXProj, x_proj),
                    (Subtype::MambaDtProj, dt_proj),
                    (Subtype::MambaOutProj, out_proj),
                ] {
                    weights.insert(LayerDescriptor::new(b, s), Arc::new(t));
                }
                blocks.push(BlockAux::Ssm { norm_gain, a, dt_bias });
            }
            BlockKind::Attn => {
                let attn_norm_gain = read_named(r, "attn_norm_gain", vec![d])?;
                let qkv = read_named(r, "qkv_proj", vec![3 * d, d])?;
                let o = read_named(r, "o_proj", vec![d, d])?;
                let mlp_norm_gain = read_named(r, "mlp_norm_gain", vec![d])?;
                let up = read_named(r, "up_proj", vec![mlp_ratio * d, d])?;
                let down = read_named(r, "down_proj", vec![d, mlp_ratio * d])?;
                for (s, t) in [
                    (Subtype::AttnQkvProj, qkv),
                    (Subtype::AttnOProj, o),
                    (Subtype::MlpUpProj, up),
                    (Subtype::MlpDownProj, down),
                ] {
                    weights.insert(LayerDescriptor::new(b, s), Arc::new(t));
                }
                blocks.push(BlockAux::Attn { attn_norm_gain, mlp_norm_gain });
            }
        }
    }

    let final_norm_gain = read_named(r, "final_norm_gain", vec![d])?;
    let lm_head = read_named(r, "lm_head", vec![vocab_size, d])?;
    weights.insert(lm_head_descriptor(&config), Arc::new(lm_head));

    // The format is closed: anything after the last tensor is corruption.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => {
            return Err(Error::malformed(
                "model file",
                "trailing bytes after lm_head".to_string(),
            ))
        }
    }

    Ok(Model::from_parts(config, weights, Arc::new(ModelAux { blocks, final_norm_gain })))
}

/// Loads from a file path.
pub fn load_model_from_path(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    load_model(&mut bytes.as_slice())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read, name: &str) -> Result<Tensor> {
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 2 {
        return Err(Error::malformed("model file", format!("tensor {name} has rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let v = read_f64(r)?;
        if !v.is_finite() {
            return Err(Error::malformed(
                "model file",
                format!("tensor {name} contains a non-finite value"),
            ));
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}
