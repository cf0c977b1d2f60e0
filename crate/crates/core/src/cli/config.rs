use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DataSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::retrieval::{CompressionMode, CompressionPolicy};
use crate::training::TrainConfig;

/// Model dimensions; the vocabulary size follows from the generated lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_dim: usize,
    pub max_seq: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl ModelSpec {
    pub fn with_vocab(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            vocab,
            enc_dim: self.enc_dim,
            max_seq: self.max_seq,
            ffn_mult: self.ffn_mult,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub mode: CompressionMode,
    pub k: usize,
}

impl PolicySpec {
    pub fn at(&self, retrieval_layer: usize) -> CompressionPolicy {
        CompressionPolicy::new(self.mode, self.k, retrieval_layer)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    /// Training questions used as probes.
    pub probe: usize,
    /// Negative entries injected alongside each probe's correct entries.
    pub negatives: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub pool_sizes: Vec<usize>,
    pub policies: Vec<PolicySpec>,
    pub seeds: Vec<u64>,
    pub samples: usize,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
}

fn default_max_new() -> usize {
    12
}

impl EvalSection {
    pub fn resolve(&self, retrieval_layer: usize, decode: bool, threads: usize) -> EvalConfig {
        EvalConfig {
            pool_sizes: self.pool_sizes.clone(),
            policies: self.policies.iter().map(|p| p.at(retrieval_layer)).collect(),
            seeds: self.seeds.clone(),
            samples: self.samples,
            retrieval_layer,
            max_new: self.max_new,
            decode,
            threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySection {
    pub pool_sizes: Vec<usize>,
    pub k: usize,
    pub tokens: usize,
    pub chunk: usize,
}

/// The whole pipeline in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub identify: IdentifyConfig,
    pub eval: EvalSection,
    /// Recall-only sweep over growing pools.
    pub scaling: EvalSection,
    /// Decoding comparison of compression modes.
    pub ablation: EvalSection,
    pub memory: MemorySection,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives every component seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.data.vocab.seed = seed;
        self.pretrain.seed = seed.wrapping_add(1);
        self.stage1.seed = seed.wrapping_add(2);
        self.stage2.seed = seed.wrapping_add(3);
        self.identify.seed = seed.wrapping_add(4);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.with_vocab(1).validate()?;
        for (name, t) in [("pretrain", &self.pretrain), ("stage1", &self.stage1), ("stage2", &self.stage2)] {
            t.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.stage2.m_train % 2 != 0 {
            return Err(Error::Config("stage2 m_train must be even so entries pair up".into()));
        }
        if self.identify.probe == 0 {
            return Err(Error::Config("identify.probe must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        for (name, e) in [("eval", &self.eval), ("scaling", &self.scaling), ("ablation", &self.ablation)] {
            e.resolve(0, true, self.threads)
                .validate(self.model.layers)
                .map_err(|err| Error::Config(format!("{name}: {err}")))?;
        }
        if self.memory.pool_sizes.is_empty() || self.memory.tokens == 0 || self.memory.chunk == 0 {
            return Err(Error::Config("memory sweep needs pool sizes, tokens and chunk".into()));
        }
        Ok(())
    }
}
