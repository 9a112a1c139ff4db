//! Versioned parameter checkpoints.
//!
//! Layout, all little-endian: magic `HCPM`, `u32` version, `u32` `d_c`,
//! `d_f`, `n_blocks`, `heads`, `u32` tensor count, `u64` value count, then
//! every parameter value as `f64` in declaration order.

use std::io::Write;
use std::path::Path;

use hcpm_core::nn::ParamStore;
use hcpm_core::pipeline::{Model, PipelineConfig};

use crate::error::{at, IoError, Result};

pub const MAGIC: &[u8; 4] = b"HCPM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 6 + 8;

/// Dimensions stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_c: u32,
    pub d_f: u32,
    pub n_blocks: u32,
    pub heads: u32,
}

impl Dims {
    pub fn of(cfg: &PipelineConfig) -> Self {
        Self {
            d_c: cfg.d_c as u32,
            d_f: cfg.d_f as u32,
            n_blocks: cfg.n_blocks as u32,
            heads: cfg.heads as u32,
        }
    }
}

pub fn encode(cfg: &PipelineConfig, params: &ParamStore) -> Vec<u8> {
    let d = Dims::of(cfg);
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.count());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, d.d_c, d.d_f, d.n_blocks, d.heads, params.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.count() as u64).to_le_bytes());
    for t in params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"))
}

/// Header dims of a checkpoint.
pub fn peek(bytes: &[u8]) -> Result<Dims> {
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Checkpoint(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(IoError::Checkpoint("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(IoError::Checkpoint(format!("unsupported version {version}")));
    }
    Ok(Dims {
        d_c: u32_at(bytes, 8),
        d_f: u32_at(bytes, 12),
        n_blocks: u32_at(bytes, 16),
        heads: u32_at(bytes, 20),
    })
}

/// Builds the model `cfg` describes and fills it from `bytes`.
pub fn decode(bytes: &[u8], cfg: &PipelineConfig) -> Result<(Model, ParamStore)> {
    let dims = peek(bytes)?;
    if dims != Dims::of(cfg) {
        return Err(IoError::Incompatible(format!("checkpoint {dims:?}, config {:?}", Dims::of(cfg))));
    }
    let (model, mut params) = Model::init(cfg)?;
    let tensors = u32_at(bytes, 24) as usize;
    let values = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes")) as usize;
    if tensors != params.len() || values != params.count() {
        return Err(IoError::Incompatible(format!(
            "checkpoint holds {tensors} tensors / {values} values, model needs {} / {}",
            params.len(),
            params.count()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * values {
        return Err(IoError::Checkpoint(format!("body is {} bytes, expected {}", body.len(), 8 * values)));
    }
    let mut chunks = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = chunks.next().expect("length checked");
        }
    }
    Ok((model, params))
}

pub fn save(path: &Path, cfg: &PipelineConfig, params: &ParamStore) -> Result<()> {
    let bytes = encode(cfg, params);
    // write-then-rename keeps the previous checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp).and_then(|mut f| f.write_all(&bytes)).map_err(at(&tmp))?;
    std::fs::rename(&tmp, path).map_err(at(path))
}

pub fn load(path: &Path, cfg: &PipelineConfig) -> Result<(Model, ParamStore)> {
    let bytes = std::fs::read(path).map_err(at(path))?;
    decode(&bytes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            d_c: 8,
            d_f: 4,
            n_blocks: 1,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn header_layout() {
        let cfg = tiny();
        let (_, p) = Model::init(&cfg).unwrap();
        let b = encode(&cfg, &p);
        assert_eq!(&b[..4], b"HCPM");
        assert_eq!(u32_at(&b, 4), 1);
        assert_eq!((u32_at(&b, 8), u32_at(&b, 12), u32_at(&b, 16), u32_at(&b, 20)), (8, 4, 1, 1));
        assert_eq!(b.len(), HEADER_LEN + 8 * p.count());
        let first = f64::from_le_bytes(b[HEADER_LEN..HEADER_LEN + 8].try_into().unwrap());
        assert_eq!(first, p.tensors()[0].data[0]);
    }

    #[test]
    fn mismatches_are_rejected() {
        let cfg = tiny();
        let (_, p) = Model::init(&cfg).unwrap();
        let b = encode(&cfg, &p);
        let other = PipelineConfig { d_c: 16, ..cfg };
        assert!(matches!(decode(&b, &other), Err(IoError::Incompatible(_))));
        assert!(matches!(decode(&b[..b.len() - 1], &cfg), Err(IoError::Checkpoint(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad, &cfg).is_err());
        let mut v2 = b;
        v2[4] = 2;
        assert!(decode(&v2, &cfg).is_err());
    }
}
