//! KB attention aggregation, top-k selection and cross-layer index reuse.
//!
//! Scores are always derived from pre-softmax KB logits. A plan lists, for
//! every layer, which KB entries that layer attends to.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    /// Every layer attends to the whole pool.
    None,
    /// Independent top-k at every layer.
    PerLayer,
    /// Top-k up to the retrieval layer; later layers reuse its indices.
    Reuse,
    /// As `Reuse`, scored by max-pooled softmax mass.
    ReuseMaxpool,
    /// Random k below the retrieval layer, then as `Reuse`.
    RandomPreRetrieval,
}

impl CompressionMode {
    pub const ALL: [CompressionMode; 5] = [
        CompressionMode::None,
        CompressionMode::PerLayer,
        CompressionMode::Reuse,
        CompressionMode::ReuseMaxpool,
        CompressionMode::RandomPreRetrieval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressionMode::None => "none",
            CompressionMode::PerLayer => "per_layer",
            CompressionMode::Reuse => "reuse",
            CompressionMode::ReuseMaxpool => "reuse_maxpool",
            CompressionMode::RandomPreRetrieval => "random_pre_retrieval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub mode: CompressionMode,
    pub k: usize,
    pub retrieval_layer: usize,
    #[serde(default = "default_kernel")]
    pub maxpool_kernel: usize,
}

fn default_kernel() -> usize {
    7
}

impl CompressionPolicy {
    pub fn none() -> Self {
        Self { mode: CompressionMode::None, k: 1, retrieval_layer: 0, maxpool_kernel: default_kernel() }
    }

    pub fn new(mode: CompressionMode, k: usize, retrieval_layer: usize) -> Self {
        Self { mode, k, retrieval_layer, maxpool_kernel: default_kernel() }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("compression k must be at least 1".into()));
        }
        if self.retrieval_layer >= num_layers {
            return Err(Error::Config(format!(
                "retrieval layer {} outside [0, {num_layers})",
                self.retrieval_layer
            )));
        }
        if self.maxpool_kernel == 0 || self.maxpool_kernel % 2 == 0 {
            return Err(Error::Config(format!("max-pool kernel must be odd and positive, got {}", self.maxpool_kernel)));
        }
        Ok(())
    }
}

/// Per-layer index lists into a KB store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub layers: Vec<Vec<usize>>,
}

impl CompressionPlan {
    pub fn all(num_layers: usize, m: usize) -> Self {
        Self { layers: vec![(0..m).collect(); num_layers] }
    }

    pub fn validate(&self, num_layers: usize, m: usize) -> Result<()> {
        if self.layers.len() != num_layers {
            return Err(Error::Invalid(format!("plan has {} layers, model has {num_layers}", self.layers.len())));
        }
        for list in &self.layers {
            let mut seen = vec![false; m];
            for &i in list {
                if i >= m {
                    return Err(Error::IndexOutOfRange { index: i, len: m });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Invalid(format!("plan repeats KB index {i} within a layer")));
                }
            }
        }
        Ok(())
    }

    /// Distinct KB rows attended anywhere at or above `from_layer`.
    pub fn distinct_from(&self, from_layer: usize) -> usize {
        let mut all: Vec<usize> = self.layers.iter().skip(from_layer).flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    }
}

/// Mean of pre-softmax KB logits over heads and query positions.
/// `kb_logits` has shape `H × N × M`.
pub fn aggregate_kb_attention(kb_logits: &Tensor) -> Result<Vec<f64>> {
    let (h, n, m) = dims3(kb_logits)?;
    if n == 0 {
        return Err(Error::Invalid("KB attention needs at least one query position".into()));
    }
    let mut out = vec![0.0; m];
    for r in 0..h * n {
        for (o, v) in out.iter_mut().zip(kb_logits.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / (h * n) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, n, m] => Ok((*h, *n, *m)),
        s => Err(Error::dim("kb attention", format!("expected H×N×M logits, got {s:?}"))),
    }
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(scores.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_score);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_score);
    idx
}

/// Sliding maximum with stride 1; windows are clipped at the boundaries.
pub fn sliding_max(scores: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    (0..scores.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(scores.len());
            scores[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Softmax over the KB axis of every (head, query) row, summed over heads
/// and queries, then max-pooled along the KB axis.
pub fn maxpool_aggregate(kb_logits: &Tensor, kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Invalid(format!("max-pool kernel must be odd and positive, got {kernel}")));
    }
    let (h, n, m) = dims3(kb_logits)?;
    let mut mass = vec![0.0; m];
    if m == 0 {
        return Ok(mass);
    }
    for r in 0..h * n {
        let row = kb_logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (o, v) in mass.iter_mut().zip(row) {
            *o += (v - max).exp() / z;
        }
    }
    Ok(sliding_max(&mass, kernel))
}

/// What a layer needs before it can choose its KB rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreNeed {
    /// Selection does not depend on scores at this layer.
    Nothing,
    /// Mean pre-softmax logit per entry.
    LogitMean,
    /// Max-pooled softmax mass with the given kernel.
    MaxPool(usize),
}

/// Layer-by-layer selection under a policy. Used both online during a
/// forward pass and offline by [`build_plan`].
#[derive(Clone, Debug)]
pub struct LayerPlanner {
    policy: CompressionPolicy,
    num_layers: usize,
    m: usize,
    rng: ChaCha8Rng,
    reused: Option<Vec<usize>>,
}

impl LayerPlanner {
    pub fn new(policy: CompressionPolicy, num_layers: usize, m: usize, seed: u64) -> Result<Self> {
        policy.validate(num_layers)?;
        Ok(Self { policy, num_layers, m, rng: ChaCha8Rng::seed_from_u64(seed), reused: None })
    }

    pub fn policy(&self) -> &CompressionPolicy {
        &self.policy
    }

    pub fn need(&self, layer: usize) -> ScoreNeed {
        use CompressionMode::*;
        let rl = self.policy.retrieval_layer;
        match self.policy.mode {
            None => ScoreNeed::Nothing,
            PerLayer => ScoreNeed::LogitMean,
            Reuse if layer <= rl => ScoreNeed::LogitMean,
            ReuseMaxpool if layer <= rl => ScoreNeed::MaxPool(self.policy.maxpool_kernel),
            RandomPreRetrieval if layer == rl => ScoreNeed::LogitMean,
            _ => ScoreNeed::Nothing,
        }
    }

    /// Chooses the rows for `layer`. `scores` must be provided whenever
    /// [`Self::need`] asks for them.
    pub fn select(&mut self, layer: usize, scores: Option<&[f64]>) -> Result<Vec<usize>> {
        use CompressionMode::*;
        if layer >= self.num_layers {
            return Err(Error::IndexOutOfRange { index: layer, len: self.num_layers });
        }
        let rl = self.policy.retrieval_layer;
        let k = self.policy.k;
        let scored = |scores: Option<&[f64]>| -> Result<Vec<usize>> {
            let s = scores.ok_or_else(|| Error::Invalid(format!("layer {layer} needs scores to select")))?;
            if s.len() != self.m {
                return Err(Error::dim("plan", format!("{} scores for {} KB entries", s.len(), self.m)));
            }
            Ok(topk_indices(s, k))
        };
        let pick = match self.policy.mode {
            None => (0..self.m).collect(),
            PerLayer => scored(scores)?,
            Reuse | ReuseMaxpool if layer < rl => scored(scores)?,
            RandomPreRetrieval if layer < rl => {
                let mut idx = sample(&mut self.rng, self.m, k.min(self.m)).into_vec();
                idx.sort_unstable();
                idx
            }
            _ if layer == rl => {
                let pick = scored(scores)?;
                self.reused = Some(pick.clone());
                pick
            }
            _ => self
                .reused
                .clone()
                .ok_or_else(|| Error::Invalid(format!("layer {layer} reuses indices before the retrieval layer ran")))?,
        };
        Ok(pick)
    }
}

/// Builds a full plan from one score vector per layer.
pub fn build_plan(per_layer_scores: &[Vec<f64>], policy: &CompressionPolicy, seed: u64) -> Result<CompressionPlan> {
    let num_layers = per_layer_scores.len();
    if num_layers == 0 {
        return Err(Error::Invalid("plan needs at least one layer".into()));
    }
    let m = per_layer_scores[0].len();
    let mut planner = LayerPlanner::new(*policy, num_layers, m, seed)?;
    let layers = (0..num_layers)
        .map(|l| planner.select(l, Some(&per_layer_scores[l])))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressionPlan { layers })
}

/// Fraction of the pool dropped when keeping `k` of `m` entries.
pub fn compression_ratio(m: usize, k: usize) -> Result<f64> {
    if k > m {
        return Err(Error::Invalid(format!("cannot keep {k} of {m} entries")));
    }
    if m == 0 {
        return Err(Error::Invalid("empty pool".into()));
    }
    Ok(1.0 - k as f64 / m as f64)
}
