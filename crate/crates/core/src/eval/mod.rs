//! Retrieval and answer metrics, the analytic memory model, and the
//! evaluation driver.

mod memory;
mod metrics;

use std::borrow::Cow;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use memory::{memory_model, MemoryEstimate};
pub use metrics::{chance_recall, exact_match, id_accuracy, recall_at_k, recall_at_top, refusal_accuracy};

use crate::datagen::{eval_pool, gold_answers, prompt_tokens, QaExample, QaType};
use crate::error::{Error, Result};
use crate::kb::KbStore;
use crate::model::{AdapterSet, Knowledge, Model};
use crate::retrieval::{topk_indices, CompressionPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pool_sizes: Vec<usize>,
    pub policies: Vec<CompressionPolicy>,
    pub seeds: Vec<u64>,
    /// Examples drawn per QA type and seed.
    pub samples: usize,
    /// Layer whose Ā ranks the pool for recall.
    pub retrieval_layer: usize,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    /// When false only the prompt is run and answer metrics are skipped.
    #[serde(default = "default_true")]
    pub decode: bool,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_max_new() -> usize {
    12
}
fn default_true() -> bool {
    true
}
fn default_threads() -> usize {
    1
}

impl EvalConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.pool_sizes.is_empty() || self.policies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("evaluation needs pool sizes, policies and seeds".into()));
        }
        if self.samples == 0 || self.max_new == 0 || self.threads == 0 {
            return Err(Error::Config("samples, max_new and threads must be at least 1".into()));
        }
        if self.retrieval_layer >= layers {
            return Err(Error::Config(format!("retrieval layer {} outside 0..{layers}", self.retrieval_layer)));
        }
        for p in &self.policies {
            p.validate(layers)?;
        }
        Ok(())
    }
}

/// Metrics of one example.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub recall_at_100: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub recall_at_top: Option<f64>,
    pub id_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub refusal_accuracy: Option<f64>,
}

/// Mean metrics for one (seed, pool size, policy, QA type) cell; `seed` is
/// `None` for the average over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: Option<u64>,
    pub pool_size: usize,
    pub policy: String,
    pub k: usize,
    pub qa_type: QaType,
    pub count: usize,
    #[serde(flatten)]
    pub metrics: ExampleMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub pool_size: usize,
    pub policy: String,
    pub k: usize,
    #[serde(flatten)]
    pub estimate: MemoryEstimate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub averages: Vec<MetricRow>,
    pub memory: Vec<MemoryRow>,
}

impl MetricsReport {
    pub fn average(&self, pool_size: usize, policy: &str, qa_type: QaType) -> Option<&MetricRow> {
        self.averages.iter().find(|r| r.pool_size == pool_size && r.policy == policy && r.qa_type == qa_type)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per seed × pool size × policy × QA type.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "seed", "pool_size", "policy", "k", "qa_type", "count", "recall_at_100", "recall_at_10", "recall_at_top",
            "id_accuracy", "exact_match", "refusal_accuracy",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.pool_size.to_string(),
                r.policy.clone(),
                r.k.to_string(),
                r.qa_type.name().to_string(),
                r.count.to_string(),
                opt(m.recall_at_100),
                opt(m.recall_at_10),
                opt(m.recall_at_top),
                opt(m.id_accuracy),
                opt(m.exact_match),
                opt(m.refusal_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one example against a pool of `pool_size` drawn from `universe`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_example(
    model: &Model,
    adapters: &AdapterSet,
    universe: &KbStore,
    ex: &QaExample,
    pool_size: usize,
    policy: &CompressionPolicy,
    retrieval_layer: usize,
    cfg_decode: Option<usize>,
    seed: u64,
) -> Result<ExampleMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, local) = eval_pool(ex, universe, pool_size, &mut rng)?;
    let pool = universe.select(&rows)?;
    let kn = Knowledge { kb: &pool, adapters };
    let prompt = prompt_tokens(&model.vocab, &ex.question)?;
    let plan_seed = rng.random::<u64>();
    let (trace, text) = match cfg_decode {
        Some(max_new) => {
            let d = model.decode(&prompt, Some(kn), max_new, policy, plan_seed)?;
            (d.trace, Some(d.text))
        }
        None => (model.forward_with_policy(&prompt, kn, policy, plan_seed)?.1, None),
    };
    let mut out = ExampleMetrics::default();
    let correct = local.correct();
    if !correct.is_empty() {
        let scores = match trace.ranking_scores(retrieval_layer, pool.len()) {
            Some(s) => s,
            None => model.forward(&prompt, Some(kn), None)?.1.layers[retrieval_layer].abar.clone(),
        };
        let ranked = topk_indices(&scores, scores.len());
        out.recall_at_100 = Some(recall_at_k(&ranked, &correct, 100)?);
        out.recall_at_10 = Some(recall_at_k(&ranked, &correct, 10)?);
        if correct.len() == 2 || correct.len() == 4 {
            out.recall_at_top = Some(recall_at_top(&ranked, &correct)?);
        }
    }
    if let Some(text) = text {
        if ex.qa_type == QaType::Unanswerable {
            out.refusal_accuracy = Some(refusal_accuracy(&text));
        } else {
            let (objects, labels) = gold_answers(&local, &pool);
            out.exact_match = Some(exact_match(&text, &objects));
            if !labels.is_empty() {
                out.id_accuracy = Some(id_accuracy(&text, &labels));
            }
        }
    }
    Ok(out)
}

fn mean_of(items: &[&ExampleMetrics], f: impl Fn(&ExampleMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = items.iter().filter_map(|m| f(m)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn summarize(items: &[&ExampleMetrics]) -> ExampleMetrics {
    ExampleMetrics {
        recall_at_100: mean_of(items, |m| m.recall_at_100),
        recall_at_10: mean_of(items, |m| m.recall_at_10),
        recall_at_top: mean_of(items, |m| m.recall_at_top),
        id_accuracy: mean_of(items, |m| m.id_accuracy),
        exact_match: mean_of(items, |m| m.exact_match),
        refusal_accuracy: mean_of(items, |m| m.refusal_accuracy),
    }
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Evaluates every (seed, pool size, policy) cell on up to `samples`
/// examples per QA type.
pub fn run_eval(
    model: &Model,
    adapters: &AdapterSet,
    qa: &[QaExample],
    universe: &KbStore,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    run_eval_with(model, &|_| Ok(Cow::Borrowed(adapters)), qa, universe, cfg)
}

/// Like [`run_eval`], but every example gets its own adapters from `draw`,
/// called with the example's seed.
pub fn run_eval_per_example(
    model: &Model,
    draw: &(dyn Fn(u64) -> Result<AdapterSet> + Sync),
    qa: &[QaExample],
    universe: &KbStore,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    run_eval_with(model, &|s| draw(s).map(Cow::Owned), qa, universe, cfg)
}

type AdapterSource<'a> = dyn Fn(u64) -> Result<Cow<'a, AdapterSet>> + Sync + 'a;

fn run_eval_with(
    model: &Model,
    adapters_for: &AdapterSource<'_>,
    qa: &[QaExample],
    universe: &KbStore,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate(model.config.layers)?;
    let mut report = MetricsReport::default();
    for &seed in &cfg.seeds {
        let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<&QaExample> = Vec::new();
        for t in QaType::ALL {
            let members: Vec<&QaExample> = qa.iter().filter(|e| e.qa_type == t).collect();
            let take = cfg.samples.min(members.len());
            let idx = rand::seq::index::sample(&mut pick_rng, members.len(), take).into_vec();
            chosen.extend(idx.into_iter().map(|i| members[i]));
        }
        for &size in &cfg.pool_sizes {
            for policy in &cfg.policies {
                let jobs: Vec<(usize, &QaExample)> = chosen.iter().copied().enumerate().collect();
                let results = par_map(&jobs, cfg.threads, |(i, ex)| {
                    let s = seed.wrapping_mul(1_000_003).wrapping_add((size as u64) << 20).wrapping_add(*i as u64);
                    evaluate_example(
                        model,
                        &*adapters_for(s)?,
                        universe,
                        ex,
                        size,
                        policy,
                        cfg.retrieval_layer,
                        cfg.decode.then_some(cfg.max_new),
                        s,
                    )
                })?;
                for t in QaType::ALL {
                    let items: Vec<&ExampleMetrics> =
                        chosen.iter().zip(&results).filter(|(e, _)| e.qa_type == t).map(|(_, m)| m).collect();
                    if items.is_empty() {
                        continue;
                    }
                    report.rows.push(MetricRow {
                        seed: Some(seed),
                        pool_size: size,
                        policy: policy.mode.name().to_string(),
                        k: policy.k,
                        qa_type: t,
                        count: items.len(),
                        metrics: summarize(&items),
                    });
                }
            }
        }
    }
    for &size in &cfg.pool_sizes {
        for policy in &cfg.policies {
            for t in QaType::ALL {
                let cells: Vec<&MetricRow> = report
                    .rows
                    .iter()
                    .filter(|r| r.pool_size == size && r.policy == policy.mode.name() && r.k == policy.k && r.qa_type == t)
                    .collect();
                if cells.is_empty() {
                    continue;
                }
                let ms: Vec<&ExampleMetrics> = cells.iter().map(|r| &r.metrics).collect();
                report.averages.push(MetricRow {
                    seed: None,
                    pool_size: size,
                    policy: policy.mode.name().to_string(),
                    k: policy.k,
                    qa_type: t,
                    count: cells.iter().map(|r| r.count).sum(),
                    metrics: summarize(&ms),
                });
            }
            let prompt_len = 16;
            report.memory.push(MemoryRow {
                pool_size: size,
                policy: policy.mode.name().to_string(),
                k: policy.k,
                estimate: memory_model(size, prompt_len, model.config.width, model.config.layers, policy, 1000.min(size))?,
            });
        }
    }
    Ok(report)
}
