//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "YLOS" | version u32 | tensor count u32
//!   per tensor: name length u32, UTF-8 name, rank u32, dims u64 each,
//!               data as f32 each
//!   trailing u32: CRC32 of every preceding byte
//!
//! Values quantize to f32 on disk; computation stays f64 in memory. Model
//! configuration rides along as small `meta.*` tensors so a checkpoint is
//! self-describing.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use yolos_core::model::{ModelConfig, Parameters, PeScheme};
use yolos_core::tensor::Tensor;

const MAGIC: &[u8; 4] = b"YLOS";
const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        bail!("checkpoint: truncated file");
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        bail!("checkpoint: CRC mismatch (stored {stored:08x}, computed {computed:08x})");
    }
    let mut cur = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur + n > body.len() {
            bail!("checkpoint: truncated body");
        }
        let s = &body[cur..cur + n];
        cur += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        bail!("checkpoint: bad magic");
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        bail!("checkpoint: unsupported version {version}");
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).context("checkpoint: tensor name not UTF-8")?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    if cur != body.len() {
        bail!("checkpoint: {} trailing bytes", body.len() - cur);
    }
    Ok(tensors)
}

fn config_meta(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    let scheme = match cfg.pe_scheme {
        PeScheme::TypeI => 1.0,
        PeScheme::TypeII => 2.0,
    };
    vec![
        (
            "meta.config".into(),
            Tensor::from_vec(
                vec![8],
                vec![
                    cfg.depth as f64,
                    cfg.width as f64,
                    cfg.heads as f64,
                    cfg.patch_size as f64,
                    cfg.det_tokens as f64,
                    cfg.num_classes as f64,
                    cfg.image_channels as f64,
                    scheme,
                ],
            )
            .unwrap(),
        ),
        ("meta.mlp_ratio".into(), Tensor::scalar(cfg.mlp_ratio)),
        (
            "meta.pe_grid".into(),
            Tensor::from_vec(vec![2], vec![cfg.pe_grid.0 as f64, cfg.pe_grid.1 as f64]).unwrap(),
        ),
    ]
}

fn config_from_meta(map: &HashMap<String, Tensor>) -> Result<ModelConfig> {
    let meta = map.get("meta.config").context("checkpoint: missing meta.config")?;
    if meta.numel() != 8 {
        bail!("checkpoint: meta.config must have 8 entries");
    }
    let d = meta.data();
    let grid = map.get("meta.pe_grid").context("checkpoint: missing meta.pe_grid")?;
    let ratio = map.get("meta.mlp_ratio").context("checkpoint: missing meta.mlp_ratio")?;
    Ok(ModelConfig {
        depth: d[0] as usize,
        width: d[1] as usize,
        heads: d[2] as usize,
        patch_size: d[3] as usize,
        det_tokens: d[4] as usize,
        num_classes: d[5] as usize,
        image_channels: d[6] as usize,
        pe_scheme: if d[7] == 1.0 { PeScheme::TypeI } else { PeScheme::TypeII },
        mlp_ratio: ratio.item(),
        pe_grid: (grid.data()[0] as usize, grid.data()[1] as usize),
    })
}

/// Writes parameters plus the self-describing configuration.
pub fn save(path: &Path, cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let meta = config_meta(cfg);
    let mut tensors: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
    tensors.extend(params.named());
    std::fs::write(path, encode(&tensors)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a checkpoint back into a typed model; every parameter tensor must
/// be present with the exact shape the configuration implies.
pub fn load(path: &Path) -> Result<(ModelConfig, Parameters)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let tensors = decode(&bytes)?;
    let map: HashMap<String, Tensor> = tensors.into_iter().collect();
    let cfg = config_from_meta(&map)?;

    // Seeded init supplies the structure; every tensor is then replaced.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut params = Parameters::init(&cfg, &mut rng)?;
    for (name, tensor) in params.named_mut() {
        let stored = map
            .get(&name)
            .with_context(|| format!("checkpoint: missing tensor {name:?}"))?;
        if stored.shape() != tensor.shape() {
            bail!(
                "checkpoint: {name:?} has shape {:?}, expected {:?}",
                stored.shape(),
                tensor.shape()
            );
        }
        *tensor = stored.clone();
    }
    Ok((cfg, params))
}
