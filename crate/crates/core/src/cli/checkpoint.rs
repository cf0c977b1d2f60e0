//! Binary adapter checkpoints and backbone snapshots.
//!
//! Adapter layout: `SRKI`, version, L, D, P, H (u32 little-endian), then for
//! each layer the query (D×D), key (P×D) and value (P×D) matrices as
//! little-endian f32. Backbone layout: `SRKM`, version, header length, a
//! JSON header, then every backbone tensor as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterSet, Backbone, LayerAdapters, Model, ModelConfig, Vocab};
use crate::numeric::Tensor;

const ADAPTER_MAGIC: &[u8; 4] = b"SRKI";
const MODEL_MAGIC: &[u8; 4] = b"SRKM";
const VERSION: u32 = 1;

pub fn save_checkpoint(adapters: &AdapterSet, heads: usize, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ADAPTER_MAGIC);
    for v in [VERSION as usize, adapters.num_layers(), adapters.width(), adapters.enc_dim(), heads] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in adapters.tensors() {
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated file: needed {} bytes, have {}", self.pos + n, self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let raw = self.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        Tensor::matrix(rows, cols, data)
    }

    fn f64_tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Loads adapters; with `expect`, the header must match its L, D, P and H.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<AdapterSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != ADAPTER_MAGIC {
        return Err(Error::Checkpoint("bad magic, not an adapter checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let [l, d, p, h] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    if let Some(cfg) = expect {
        for (name, want, got) in [("L", cfg.layers, l), ("D", cfg.width, d), ("P", cfg.enc_dim, p), ("H", cfg.heads, h)] {
            if want != got {
                return Err(Error::dim("checkpoint", format!("{name}: expected {want}, found {got}")));
            }
        }
    }
    if l == 0 || d == 0 || p == 0 || h == 0 {
        return Err(Error::Checkpoint("header has a zero dimension".into()));
    }
    let layers = (0..l)
        .map(|_| Ok(LayerAdapters { query: r.f32_tensor(d, d)?, key: r.f32_tensor(p, d)?, value: r.f32_tensor(p, d)? }))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    AdapterSet::from_layers(layers)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    vocab: Vocab,
    encoder_seed: u64,
    shapes: Vec<Vec<usize>>,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let tensors = model.backbone.tensors();
    let header = ModelHeader {
        config: model.config,
        vocab: model.vocab.clone(),
        encoder_seed: model.encoder_seed,
        shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model snapshot".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = r.u32()? as usize;
    let header: ModelHeader = serde_json::from_slice(r.take(len)?)?;
    let cfg = header.config;
    let mut bb = Backbone::init(&cfg, &header.vocab, None, 0)?;
    let expected: Vec<Vec<usize>> = bb.tensors().iter().map(|t| t.shape().to_vec()).collect();
    if expected != header.shapes {
        return Err(Error::dim("model snapshot", "tensor shapes do not match the configuration".to_string()));
    }
    for t in bb.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = r.f64_tensor(&shape)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::new(cfg, header.vocab, bb, header.encoder_seed)
}
