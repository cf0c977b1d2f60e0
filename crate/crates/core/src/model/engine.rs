//! Plain (tape-free) inference with a token KV cache.

use serde::{Deserialize, Serialize};

use super::attention::attend_block;
use super::config::ModelConfig;
use super::vocab::Vocab;
use super::weights::{AdapterSet, Backbone};
use crate::error::{Error, Result};
use crate::kb::{KbStore, TextEncoder};
use crate::numeric::kernels::{gelu, layer_norm};
use crate::numeric::{matmul, Tensor};
use crate::retrieval::{
    aggregate_kb_attention, maxpool_aggregate, CompressionPlan, CompressionPolicy, LayerPlanner, ScoreNeed,
};

/// A KB together with the adapters that project it into the model.
#[derive(Clone, Copy, Debug)]
pub struct Knowledge<'a> {
    pub kb: &'a KbStore,
    pub adapters: &'a AdapterSet,
}

/// Attention record for one layer of a prefill pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// KB rows attended at this layer, in attention order.
    pub injected: Vec<usize>,
    /// Pre-softmax KB logits, `H × N × injected.len()`.
    pub kb_logits: Tensor,
    /// Mean of `kb_logits` over heads and positions, one per injected row.
    pub abar: Vec<f64>,
    /// Mean logit for every pool entry, when this layer scored the pool.
    pub pool_scores: Option<Vec<f64>>,
    /// Max-pooled scores used for selection, when the policy asked for them.
    pub pooled_scores: Option<Vec<f64>>,
    /// Softmax mass on KB entries per position, averaged over heads.
    pub kb_mass: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RectAttnTrace {
    pub layers: Vec<LayerTrace>,
}

impl RectAttnTrace {
    /// Mean-logit score for every pool entry at `layer`: either the scores
    /// computed for selection or, when every entry was injected in order,
    /// the layer's Ā.
    pub fn ranking_scores(&self, layer: usize, m: usize) -> Option<Vec<f64>> {
        let lt = self.layers.get(layer)?;
        if let Some(s) = &lt.pool_scores {
            return Some(s.clone());
        }
        let full = lt.injected.len() == m && lt.injected.iter().enumerate().all(|(i, &j)| i == j);
        full.then(|| lt.abar.clone())
    }

    pub fn plan(&self) -> CompressionPlan {
        CompressionPlan { layers: self.layers.iter().map(|l| l.injected.clone()).collect() }
    }
}

/// Result of greedy decoding.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub text: String,
    pub tokens: Vec<usize>,
    pub plan: CompressionPlan,
    pub trace: RectAttnTrace,
}

/// Frozen backbone plus its vocabulary and the KB text encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub backbone: Backbone,
    pub encoder_seed: u64,
}

enum Selector<'a> {
    Plan(&'a CompressionPlan),
    Planner(LayerPlanner),
}

struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    kb_keys: Tensor,
    kb_values: Tensor,
}

struct Cache {
    layers: Vec<LayerCache>,
    len: usize,
}

fn row_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let (out, _, _) = layer_norm(x.data(), gain.data(), bias.data(), rows, cols);
    Tensor::matrix(rows, cols, out).expect("layer norm keeps shape")
}

fn add_bias(x: &mut Tensor, bias: &Tensor) {
    let cols = x.cols();
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(&bias.data()[..cols]) {
            *v += b;
        }
    }
}

/// `H × N × M` KB logits for every pool entry without projecting the pool:
/// `q̃ₕ · (e W̃_K)ₕ = e · (W̃_K[:, h] q̃ₕ)`.
fn pool_logits(kb_queries: &Tensor, wk: &Tensor, emb: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = (kb_queries.rows(), kb_queries.cols());
    let (m, p) = (emb.rows(), emb.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; heads * n * m];
    let mut u = vec![0.0; p];
    for h in 0..heads {
        for i in 0..n {
            let q = &kb_queries.row(i)[h * dh..(h + 1) * dh];
            for (a, ua) in u.iter_mut().enumerate() {
                *ua = wk.row(a)[h * dh..(h + 1) * dh].iter().zip(q).map(|(w, q)| w * q).sum::<f64>() * scale;
            }
            let dst = &mut out[(h * n + i) * m..(h * n + i + 1) * m];
            for (j, o) in dst.iter_mut().enumerate() {
                *o = emb.row(j).iter().zip(&u).map(|(e, u)| e * u).sum();
            }
        }
    }
    Tensor::new(vec![heads, n, m], out)
}

/// Mean KB logit for every pool entry: `e · W̃_K q̄ / (H √dh)` with `q̄` the
/// mean KB query.
pub(crate) fn pool_mean_scores(kb_queries: &Tensor, wk: &Tensor, emb: &Tensor, heads: usize) -> Vec<f64> {
    let (n, d) = (kb_queries.rows(), kb_queries.cols());
    let dh = d / heads;
    let mut qbar = vec![0.0; d];
    for i in 0..n {
        for (a, b) in qbar.iter_mut().zip(kb_queries.row(i)) {
            *a += b;
        }
    }
    let denom = n as f64 * heads as f64 * (dh as f64).sqrt();
    let u: Vec<f64> = (0..wk.rows()).map(|a| wk.row(a).iter().zip(&qbar).map(|(w, q)| w * q).sum::<f64>() / denom).collect();
    (0..emb.rows()).map(|j| emb.row(j).iter().zip(&u).map(|(e, u)| e * u).sum()).collect()
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, backbone: Backbone, encoder_seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab {
            return Err(Error::Config(format!("vocab has {} words, config says {}", vocab.len(), config.vocab)));
        }
        let d = config.width;
        let ok = backbone.tok_emb.shape() == [config.vocab, d]
            && backbone.pos_emb.shape() == [config.max_seq, d]
            && backbone.blocks.len() == config.layers
            && backbone.unembed.shape() == [d, config.vocab];
        if !ok {
            return Err(Error::dim("model", "backbone weights do not match the configuration".to_string()));
        }
        Ok(Self { config, vocab, backbone, encoder_seed })
    }

    pub fn encoder(&self) -> TextEncoder {
        TextEncoder::new(self.config.enc_dim, self.encoder_seed)
    }

    fn check_knowledge(&self, k: Option<Knowledge<'_>>) -> Result<()> {
        if let Some(k) = k {
            k.adapters.matches(&self.config)?;
            if k.kb.dim() != self.config.enc_dim {
                return Err(Error::dim("forward", format!("KB dim {} but model P={}", k.kb.dim(), self.config.enc_dim)));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize], start: usize) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.config.vocab });
        }
        if start + tokens.len() > self.config.max_seq {
            return Err(Error::IndexOutOfRange { index: start + tokens.len() - 1, len: self.config.max_seq });
        }
        Ok(())
    }

    fn new_cache(&self) -> Cache {
        let d = self.config.width;
        Cache {
            layers: (0..self.config.layers)
                .map(|_| LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                    kb_keys: Tensor::zeros(&[0, d]),
                    kb_values: Tensor::zeros(&[0, d]),
                })
                .collect(),
            len: 0,
        }
    }

    /// Runs `tokens` at positions `cache.len..`. A prefill (empty cache)
    /// chooses and projects the KB rows of every layer; later blocks reuse
    /// them. Returns logits for the block.
    fn run_block(
        &self,
        tokens: &[usize],
        knowledge: Option<Knowledge<'_>>,
        cache: &mut Cache,
        mut selector: Option<&mut Selector<'_>>,
        mut trace: Option<&mut RectAttnTrace>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let bb = &self.backbone;
        let (n, d) = (tokens.len(), cfg.width);
        let start = cache.len;
        let prefill = start == 0;
        self.check_tokens(tokens, start)?;

        let mut h = Tensor::zeros(&[n, d]);
        for (i, &t) in tokens.iter().enumerate() {
            let row = h.row_mut(i);
            for ((o, a), b) in row.iter_mut().zip(bb.tok_emb.row(t)).zip(bb.pos_emb.row(start + i)) {
                *o = a + b;
            }
        }

        for (l, blk) in bb.blocks.iter().enumerate() {
            let x = row_layer_norm(&h, &blk.ln1_gain, &blk.ln1_bias);
            let q = matmul(&x, &blk.wq)?;
            let k = matmul(&x, &blk.wk)?;
            let v = matmul(&x, &blk.wv)?;
            let lc = &mut cache.layers[l];
            lc.keys.extend_from_slice(k.data());
            lc.values.extend_from_slice(v.data());
            let total = start + n;
            let keys = Tensor::matrix(total, d, lc.keys.clone())?;
            let values = Tensor::matrix(total, d, lc.values.clone())?;

            let kb_queries = match knowledge {
                Some(kn) => matmul(&x, &kn.adapters.layers()[l].query)?,
                None => Tensor::zeros(&[n, d]),
            };
            let mut layer_trace = LayerTrace::default();
            if prefill {
                if let Some(kn) = knowledge {
                    let ad = &kn.adapters.layers()[l];
                    let m = kn.kb.len();
                    let emb = kn.kb.key_matrix(None);
                    let injected = match selector.as_deref_mut() {
                        None => (0..m).collect(),
                        Some(Selector::Plan(plan)) => plan.layers[l].clone(),
                        Some(Selector::Planner(planner)) => match planner.need(l) {
                            ScoreNeed::Nothing => planner.select(l, None)?,
                            ScoreNeed::LogitMean => {
                                let s = pool_mean_scores(&kb_queries, &ad.key, &emb, cfg.heads);
                                let pick = planner.select(l, Some(&s))?;
                                layer_trace.pool_scores = Some(s);
                                pick
                            }
                            ScoreNeed::MaxPool(kernel) => {
                                let logits = pool_logits(&kb_queries, &ad.key, &emb, cfg.heads)?;
                                let pooled = maxpool_aggregate(&logits, kernel)?;
                                let pick = planner.select(l, Some(&pooled))?;
                                layer_trace.pool_scores = Some(aggregate_kb_attention(&logits)?);
                                layer_trace.pooled_scores = Some(pooled);
                                pick
                            }
                        },
                    };
                    if let Some(&bad) = injected.iter().find(|&&i| i >= m) {
                        return Err(Error::IndexOutOfRange { index: bad, len: m });
                    }
                    lc.kb_keys = matmul(&kn.kb.key_matrix(Some(&injected)), &ad.key)?;
                    lc.kb_values = matmul(&kn.kb.value_matrix(Some(&injected)), &ad.value)?;
                    layer_trace.injected = injected;
                }
            }
            let (attn, kb_logits, kb_mass) =
                attend_block(&q, &kb_queries, &keys, &values, &lc.kb_keys, &lc.kb_values, cfg.heads, true)?;
            if prefill {
                if let Some(tr) = trace.as_deref_mut() {
                    layer_trace.abar = if kb_logits.shape()[2] == 0 { Vec::new() } else { aggregate_kb_attention(&kb_logits)? };
                    layer_trace.kb_logits = kb_logits;
                    layer_trace.kb_mass = kb_mass;
                    tr.layers.push(layer_trace);
                }
            }
            let proj = matmul(&attn, &blk.wo)?;
            for (a, b) in h.data_mut().iter_mut().zip(proj.data()) {
                *a += b;
            }
            let x2 = row_layer_norm(&h, &blk.ln2_gain, &blk.ln2_bias);
            let mut f = matmul(&x2, &blk.w1)?;
            add_bias(&mut f, &blk.b1);
            for v in f.data_mut() {
                *v = gelu(*v);
            }
            let mut f2 = matmul(&f, &blk.w2)?;
            add_bias(&mut f2, &blk.b2);
            for (a, b) in h.data_mut().iter_mut().zip(f2.data()) {
                *a += b;
            }
        }
        cache.len += n;
        let xf = row_layer_norm(&h, &bb.lnf_gain, &bb.lnf_bias);
        let logits = matmul(&xf, &bb.unembed)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("forward logits"));
        }
        Ok(logits)
    }

    /// Full forward pass over `tokens`. With a plan, layer `l` attends only
    /// to the plan's rows; without one, to every KB row.
    pub fn forward(
        &self,
        tokens: &[usize],
        knowledge: Option<Knowledge<'_>>,
        plan: Option<&CompressionPlan>,
    ) -> Result<(Tensor, RectAttnTrace)> {
        self.check_knowledge(knowledge)?;
        if tokens.is_empty() {
            return Err(Error::Invalid("forward needs at least one token".into()));
        }
        let mut selector = match (plan, knowledge) {
            (Some(p), Some(k)) => {
                p.validate(self.config.layers, k.kb.len())?;
                Some(Selector::Plan(p))
            }
            _ => None,
        };
        let mut cache = self.new_cache();
        let mut trace = RectAttnTrace::default();
        let logits = self.run_block(tokens, knowledge, &mut cache, selector.as_mut(), Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Forward pass whose KB rows are chosen layer by layer under `policy`.
    pub fn forward_with_policy(
        &self,
        tokens: &[usize],
        knowledge: Knowledge<'_>,
        policy: &CompressionPolicy,
        seed: u64,
    ) -> Result<(Tensor, RectAttnTrace)> {
        self.check_knowledge(Some(knowledge))?;
        if tokens.is_empty() {
            return Err(Error::Invalid("forward needs at least one token".into()));
        }
        let planner = LayerPlanner::new(*policy, self.config.layers, knowledge.kb.len(), seed)?;
        let mut selector = Selector::Planner(planner);
        let mut cache = self.new_cache();
        let mut trace = RectAttnTrace::default();
        let logits = self.run_block(tokens, Some(knowledge), &mut cache, Some(&mut selector), Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Logits from feeding `tokens` one at a time through the cache, for
    /// checking that incremental and full passes agree.
    pub fn forward_incremental(&self, tokens: &[usize], knowledge: Option<Knowledge<'_>>, prefill: usize) -> Result<Tensor> {
        self.check_knowledge(knowledge)?;
        if prefill == 0 || prefill > tokens.len() {
            return Err(Error::Invalid(format!("prefill length {prefill} outside 1..={}", tokens.len())));
        }
        let mut cache = self.new_cache();
        let mut rows = Vec::with_capacity(tokens.len());
        let first = self.run_block(&tokens[..prefill], knowledge, &mut cache, None, None)?;
        rows.extend((0..first.rows()).map(|r| first.row(r).to_vec()));
        for &t in &tokens[prefill..] {
            let step = self.run_block(&[t], knowledge, &mut cache, None, None)?;
            rows.push(step.row(0).to_vec());
        }
        Tensor::from_rows(&rows)
    }

    /// Greedy decoding. The prompt is prefilled once, which fixes the KB
    /// selection for every layer; generation stops at `<eos>` or after
    /// `max_new` tokens.
    pub fn decode(
        &self,
        prompt: &[usize],
        knowledge: Option<Knowledge<'_>>,
        max_new: usize,
        policy: &CompressionPolicy,
        seed: u64,
    ) -> Result<Decoded> {
        self.check_knowledge(knowledge)?;
        let selector = match knowledge {
            Some(k) => Some(Selector::Planner(LayerPlanner::new(*policy, self.config.layers, k.kb.len(), seed)?)),
            None => None,
        };
        self.decode_with(prompt, knowledge, max_new, selector)
    }

    /// Greedy decoding with fixed per-layer KB rows.
    pub fn decode_with_plan(
        &self,
        prompt: &[usize],
        knowledge: Knowledge<'_>,
        max_new: usize,
        plan: &CompressionPlan,
    ) -> Result<Decoded> {
        self.check_knowledge(Some(knowledge))?;
        plan.validate(self.config.layers, knowledge.kb.len())?;
        self.decode_with(prompt, Some(knowledge), max_new, Some(Selector::Plan(plan)))
    }

    fn decode_with(
        &self,
        prompt: &[usize],
        knowledge: Option<Knowledge<'_>>,
        max_new: usize,
        mut selector: Option<Selector<'_>>,
    ) -> Result<Decoded> {
        if max_new == 0 {
            return Err(Error::Invalid("max_new must be at least 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Invalid("decode needs a non-empty prompt".into()));
        }
        let mut cache = self.new_cache();
        let mut trace = RectAttnTrace::default();
        let logits = self.run_block(prompt, knowledge, &mut cache, selector.as_mut(), Some(&mut trace))?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        let mut out = Vec::new();
        let eos = self.vocab.eos();
        for step in 0..max_new {
            if next == eos {
                break;
            }
            out.push(next);
            if step + 1 == max_new || cache.len + 1 > self.config.max_seq {
                break;
            }
            let l = self.run_block(&[next], knowledge, &mut cache, None, None)?;
            next = argmax(l.row(0));
        }
        Ok(Decoded { text: self.vocab.detokenize(&out), tokens: out, plan: trace.plan(), trace })
    }
}

/// First index of the largest value.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over the answer span.
pub fn lm_loss(logits: &Tensor, targets: &[usize], answer_mask: &[bool]) -> Result<f64> {
    if !answer_mask.iter().any(|&b| b) {
        return Err(Error::Invalid("empty answer span".into()));
    }
    crate::numeric::cross_entropy(logits, targets, answer_mask)
}
