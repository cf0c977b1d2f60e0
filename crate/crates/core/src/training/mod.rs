//! Backbone pretraining, adapter training in two stages, and retrieval-layer
//! identification.

mod losses;
mod optim;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use losses::{attention_loss, attention_loss_node, select_hard_negatives, CandidateSet};
pub use optim::{lr_at, AdamW, AdamWConfig};

use crate::datagen::{
    encode_sequence, eval_pool, gold_answers, prompt_tokens, random_pretrain_example, sample_batch, Lexicon, Mix,
    QaExample, QaType,
};
use crate::error::{Error, Result};
use crate::eval::{exact_match, id_accuracy, par_map};
use crate::kb::KbStore;
use crate::model::{
    adapter_grads, tape_forward, AdapterSet, Knowledge, LayerAdapters, Model, TapeAdapters, TapeBackbone, TapePass,
    TrainSelect, BACKBONE_PARAM_BASE,
};
use crate::numeric::{GradTape, ParamId, Tensor, Var};
use crate::retrieval::CompressionPlan;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub k_train: usize,
    pub m_train: usize,
    pub seed: u64,
    #[serde(default)]
    pub mix: Mix,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Steps between loss log lines; 0 disables logging.
    #[serde(default)]
    pub log_every: usize,
}

fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.k_train == 0 || self.k_train > self.m_train {
            return Err(Error::Config(format!("k_train {} must lie in 1..={}", self.k_train, self.m_train)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate, warm-up ratio or weight decay out of range".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..Default::default() }
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub l_lm: f64,
    pub l_a: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Query adapters copy the backbone query weights; key and value adapters are
/// seeded normal with standard deviation `1/√P`.
pub fn init_adapters(model: &Model, seed: u64) -> Result<AdapterSet> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (cfg.enc_dim as f64).sqrt()).expect("finite std");
    let mut draw = |rows: usize, cols: usize| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
    };
    let layers = model
        .backbone
        .blocks
        .iter()
        .map(|b| LayerAdapters { query: b.wq.clone(), key: draw(cfg.enc_dim, cfg.width), value: draw(cfg.enc_dim, cfg.width) })
        .collect();
    AdapterSet::from_layers(layers)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, detail: format!("{what} is {v}") })
    }
}

fn mean_node(tape: &mut GradTape, parts: &[Var]) -> Result<Var> {
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(tape.scale(total, 1.0 / parts.len() as f64))
}

/// Next-token pretraining of the backbone (everything except the token
/// embedding) on template text whose objects and labels are random, so no
/// fact can be memorized.
pub fn pretrain_backbone(model: &mut Model, lexicon: &Lexicon, id_len: usize, cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.backbone.tensors().iter().skip(1).map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &sizes);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = GradTape::new();
        let bb = TapeBackbone::register(&mut tape, &model.backbone);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (q, a) = random_pretrain_example(lexicon, id_len, &mut rng);
            let seq = encode_sequence(&model.vocab, &q, &a)?;
            let n = seq.tokens.len();
            let targets: Vec<usize> = (0..n).map(|i| if i + 1 < n { seq.tokens[i + 1] } else { 0 }).collect();
            let mask: Vec<bool> = (0..n).map(|i| i + 1 < n).collect();
            let pass = TapePass { tokens: &seq.tokens, prompt_len: seq.prompt_len, kb: None, select: TrainSelect::All, abar_layer: None };
            let out = tape_forward(&mut tape, &model.config, &bb, None, &pass)?;
            losses.push(tape.cross_entropy(out.logits, &targets, &mask)?);
        }
        let loss = mean_node(&mut tape, &losses)?;
        let l = tape.scalar(loss);
        check_finite(step, "pretraining loss", l)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> =
            (1..=sizes.len()).map(|i| grads[&ParamId(BACKBONE_PARAM_BASE + i)].clone()).collect();
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_ratio);
        let mut params: Vec<&mut Tensor> = model.backbone.tensors_mut().into_iter().skip(1).collect();
        opt.step(&mut params, &g, lr)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("pretrain step {step}: loss {l:.4}");
        }
        curve.push(LossPoint { step, l_lm: l, l_a: 0.0 });
    }
    Ok(curve)
}

/// Retrieval-layer settings for the second training stage.
#[derive(Clone, Copy, Debug)]
struct Stage2 {
    layer: usize,
}

fn adapter_step(
    model: &Model,
    adapters: &mut AdapterSet,
    dataset: &[QaExample],
    universe: &KbStore,
    cfg: &TrainConfig,
    stage2: Option<Stage2>,
    step: usize,
    rng: &mut ChaCha8Rng,
    opt: &mut AdamW,
) -> Result<LossPoint> {
    let batch = sample_batch(dataset, universe, cfg.m_train, cfg.batch_size, cfg.mix, rng)?;
    let mut tape = GradTape::new();
    let bb = TapeBackbone::constant(&mut tape, &model.backbone);
    let ta = TapeAdapters::register(&mut tape, adapters);
    let mut totals = Vec::with_capacity(batch.examples.len());
    let (mut sum_lm, mut sum_a, mut count_a) = (0.0, 0.0, 0usize);
    for ex in &batch.examples {
        let seq = encode_sequence(&model.vocab, &ex.question, &ex.answer)?;
        let (targets, mask) = seq.targets();
        let pass = TapePass {
            tokens: &seq.tokens,
            prompt_len: seq.prompt_len,
            kb: Some(&batch.pool),
            select: match stage2 {
                Some(s) => TrainSelect::TopK { k: cfg.k_train, full_layer: s.layer },
                None => TrainSelect::All,
            },
            abar_layer: stage2.map(|s| s.layer),
        };
        let out = tape_forward(&mut tape, &model.config, &bb, Some(&ta), &pass)?;
        let lm = tape.cross_entropy(out.logits, &targets, &mask)?;
        sum_lm += tape.scalar(lm);
        let correct = ex.correct();
        let total = match (stage2, out.abar) {
            (Some(_), Some(abar)) if !correct.is_empty() => {
                let sets = select_hard_negatives(tape.value(abar).data(), &correct, cfg.k_train)?;
                let la = attention_loss_node(&mut tape, abar, &sets, cfg.temperature)?;
                sum_a += tape.scalar(la);
                count_a += 1;
                tape.add(lm, la)?
            }
            _ => lm,
        };
        totals.push(total);
    }
    let loss = mean_node(&mut tape, &totals)?;
    check_finite(step, "training loss", tape.scalar(loss))?;
    let grads = tape.backward(loss)?;
    let g = adapter_grads(&grads, model.config.layers)?;
    let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_ratio);
    opt.step(&mut adapters.tensors_mut(), &g, lr)?;
    let n = batch.examples.len() as f64;
    Ok(LossPoint { step, l_lm: sum_lm / n, l_a: if count_a > 0 { sum_a / count_a as f64 } else { 0.0 } })
}

fn train_adapters(
    model: &Model,
    adapters: &mut AdapterSet,
    dataset: &[QaExample],
    universe: &KbStore,
    cfg: &TrainConfig,
    stage2: Option<Stage2>,
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    adapters.matches(&model.config)?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = adapters.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &sizes);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let p = adapter_step(model, adapters, dataset, universe, cfg, stage2, step, &mut rng, &mut opt)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step}: l_lm {:.4} l_a {:.4}", p.l_lm, p.l_a);
        }
        curve.push(p);
    }
    Ok(curve)
}

/// Adapter training with the LM loss only; every layer sees the whole pool.
pub fn stage1_train(
    model: &Model,
    adapters: &mut AdapterSet,
    dataset: &[QaExample],
    universe: &KbStore,
    cfg: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    train_adapters(model, adapters, dataset, universe, cfg, None)
}

/// Adapter training with `L_lm + L_a`. Layers other than `retrieval_layer`
/// keep their top-`k_train` rows; the retrieval layer sees the whole pool
/// and its Ā supplies the attention loss.
pub fn stage2_train(
    model: &Model,
    adapters: &mut AdapterSet,
    retrieval_layer: usize,
    dataset: &[QaExample],
    universe: &KbStore,
    cfg: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    if retrieval_layer >= model.config.layers {
        return Err(Error::IndexOutOfRange { index: retrieval_layer, len: model.config.layers });
    }
    train_adapters(model, adapters, dataset, universe, cfg, Some(Stage2 { layer: retrieval_layer }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub id_accuracy: f64,
    pub exact_match: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTable {
    pub best: usize,
    pub layers: Vec<LayerScore>,
}

impl LayerTable {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// For each layer, decodes every probe question with the correct entries
/// injected only at that layer (other layers see negatives only) and scores
/// the mean of ID accuracy and exact match. Ties go to the lower layer.
pub fn identify_retrieval_layer(
    model: &Model,
    adapters: &AdapterSet,
    probe: &[QaExample],
    universe: &KbStore,
    num_negatives: usize,
    seed: u64,
    threads: usize,
) -> Result<LayerTable> {
    let probe: Vec<&QaExample> = probe.iter().filter(|e| e.qa_type != QaType::Unanswerable).collect();
    if probe.is_empty() {
        return Err(Error::Invalid("probe set has no answerable questions".into()));
    }
    let layers = model.config.layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..probe.len()).map(|_| rng.random()).collect();
    let jobs: Vec<(&QaExample, u64)> = probe.iter().copied().zip(seeds).collect();
    let per_example = par_map(&jobs, threads, |&(ex, s)| -> Result<Vec<(f64, f64)>> {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let size = ex.correct().len() + num_negatives;
        let (rows, local) = eval_pool(ex, universe, size, &mut r)?;
        let pool = universe.select(&rows)?;
        let correct = local.correct();
        let negatives: Vec<usize> = (0..pool.len()).filter(|i| !correct.contains(i)).collect();
        let prompt = prompt_tokens(&model.vocab, &ex.question)?;
        let (objects, labels) = gold_answers(&local, &pool);
        (0..layers)
            .map(|l| {
                let plan = CompressionPlan {
                    layers: (0..layers).map(|j| if j == l { (0..pool.len()).collect() } else { negatives.clone() }).collect(),
                };
                let d = model.decode_with_plan(&prompt, Knowledge { kb: &pool, adapters }, 12, &plan)?;
                let id = if labels.is_empty() { 0.0 } else { id_accuracy(&d.text, &labels) };
                Ok((id, exact_match(&d.text, &objects)))
            })
            .collect()
    })?;
    let n = per_example.len() as f64;
    let table: Vec<LayerScore> = (0..layers)
        .map(|l| {
            let id = per_example.iter().map(|r| r[l].0).sum::<f64>() / n;
            let em = per_example.iter().map(|r| r[l].1).sum::<f64>() / n;
            LayerScore { layer: l, id_accuracy: id, exact_match: em, score: 0.5 * (id + em) }
        })
        .collect();
    let mut best = 0;
    for s in &table {
        if s.score > table[best].score {
            best = s.layer;
        }
    }
    Ok(LayerTable { best, layers: table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_bad_temperature_and_k() {
        let mut c = TrainConfig {
            learning_rate: 1e-3,
            warmup_ratio: 0.01,
            weight_decay: 1e-4,
            batch_size: 2,
            steps: 1,
            temperature: 0.05,
            k_train: 5,
            m_train: 10,
            seed: 0,
            mix: Mix::default(),
            clip_norm: 1.0,
            log_every: 0,
        };
        assert!(c.validate().is_ok());
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c.temperature = 0.05;
        c.k_train = 11;
        assert!(c.validate().is_err());
    }
}
