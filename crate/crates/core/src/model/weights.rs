use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::kb::{normalized_words, TextEncoder};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Frozen decoder weights: pre-norm blocks with learned absolute positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub unembed: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("sized")
}

fn ones(n: usize) -> Tensor {
    Tensor::row_vector(vec![1.0; n])
}

impl Backbone {
    /// Seeded random backbone. When a lexicon encoder is given, the first
    /// `min(P, D)` coordinates of every word's token embedding hold that
    /// word's encoder vector, so backbone and KB encoder share lexical
    /// geometry; the remaining coordinates are random. The unembedding starts
    /// as the transposed token embedding.
    pub fn init(cfg: &ModelConfig, vocab: &Vocab, lexicon: Option<&TextEncoder>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != cfg.vocab {
            return Err(Error::Config(format!("vocab has {} words, config says {}", vocab.len(), cfg.vocab)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let f = cfg.hidden();

        let mut tok_emb = gaussian(&mut rng, cfg.vocab, d, 1.0 / (d as f64).sqrt());
        if let Some(enc) = lexicon {
            let p = enc.dim.min(d);
            let tail = 0.5 / ((d - p).max(1) as f64).sqrt();
            for (id, w) in vocab.words().iter().enumerate() {
                if normalized_words(w).is_empty() {
                    continue;
                }
                let feat = enc.encode(w)?;
                let row = tok_emb.row_mut(id);
                row[..p].copy_from_slice(&feat[..p]);
                for v in &mut row[p..] {
                    *v *= tail * (d as f64).sqrt();
                }
            }
        }
        let pos_emb = gaussian(&mut rng, cfg.max_seq, d, 0.3 / (d as f64).sqrt());

        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(&[1, d]),
                wq: gaussian(&mut rng, d, d, proj_std),
                wk: gaussian(&mut rng, d, d, proj_std),
                wv: gaussian(&mut rng, d, d, proj_std),
                wo: gaussian(&mut rng, d, d, out_std),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(&[1, d]),
                w1: gaussian(&mut rng, d, f, proj_std),
                b1: Tensor::zeros(&[1, f]),
                w2: gaussian(&mut rng, f, d, 1.0 / (f as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt()),
                b2: Tensor::zeros(&[1, d]),
            })
            .collect();
        Ok(Self {
            pos_emb,
            blocks,
            lnf_gain: ones(d),
            lnf_bias: Tensor::zeros(&[1, d]),
            unembed: tok_emb.transpose(),
            tok_emb,
        })
    }

    /// Every weight tensor in a fixed order; the token embedding comes first.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1, &b.w2,
                &b.b2,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.unembed]);
        out
    }
}

/// Trainable projections for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapters {
    /// `D × D`, maps hidden states to KB queries.
    pub query: Tensor,
    /// `P × D`, maps key embeddings into the model width.
    pub key: Tensor,
    /// `P × D`, maps value embeddings into the model width.
    pub value: Tensor,
}

/// Per-layer adapters; the only parameters trained after backbone pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    layers: Vec<LayerAdapters>,
}

impl AdapterSet {
    pub fn from_layers(layers: Vec<LayerAdapters>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Config("adapter set needs at least one layer".into()))?;
        let d = first.query.cols();
        let p = first.key.rows();
        for (l, a) in layers.iter().enumerate() {
            let ok = a.query.shape() == [d, d] && a.key.shape() == [p, d] && a.value.shape() == [p, d];
            if !ok {
                return Err(Error::dim(
                    "adapters",
                    format!(
                        "layer {l}: query {:?}, key {:?}, value {:?} (expected D={d}, P={p})",
                        a.query.shape(),
                        a.key.shape(),
                        a.value.shape()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerAdapters] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerAdapters] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].query.cols()
    }

    pub fn enc_dim(&self) -> usize {
        self.layers[0].key.rows()
    }

    /// Tensors in `layer * 3 + {query, key, value}` order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|a| [&a.query, &a.key, &a.value]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|a| [&mut a.query, &mut a.key, &mut a.value]).collect()
    }

    pub fn matches(&self, cfg: &ModelConfig) -> Result<()> {
        if self.num_layers() != cfg.layers || self.width() != cfg.width || self.enc_dim() != cfg.enc_dim {
            return Err(Error::dim(
                "adapters",
                format!(
                    "adapters are L={} D={} P={}, model is L={} D={} P={}",
                    self.num_layers(),
                    self.width(),
                    self.enc_dim(),
                    cfg.layers,
                    cfg.width,
                    cfg.enc_dim
                ),
            ));
        }
        Ok(())
    }
}
