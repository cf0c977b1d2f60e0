//! Pipeline steps. Each step reads its inputs from and writes its outputs to
//! one run directory.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model};
use super::config::RunConfig;
use crate::datagen::{generate_corpus, read_qa, write_qa, Lexicon, QaExample};
use crate::error::{Error, Result};
use crate::eval::{memory_model, run_eval, run_eval_per_example, MemoryRow, MetricsReport};
use crate::kb::{read_entries, write_entries, write_triples, KbStore, TextEncoder};
use crate::model::{AdapterSet, Backbone, Model, Vocab};
use crate::retrieval::{CompressionMode, CompressionPolicy};
use crate::training::{
    identify_retrieval_layer, init_adapters, pretrain_backbone, stage1_train, stage2_train, write_curve_csv, LayerTable,
};

pub const LEXICON: &str = "lexicon.json";
pub const TRIPLES: &str = "triples.jsonl";
pub const ENTRIES: &str = "entries.jsonl";
pub const QA_TRAIN: &str = "qa.jsonl";
pub const QA_TEST: &str = "qa_test.jsonl";
pub const MODEL: &str = "model.bin";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const STAGE1: &str = "adapters_stage1.srki";
pub const STAGE1_LOSS: &str = "stage1_loss.csv";
pub const LAYER_TABLE: &str = "layer_table.json";
pub const STAGE2: &str = "adapters_stage2.srki";
pub const STAGE2_LOSS: &str = "stage2_loss.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SCALING: &str = "scaling.json";
pub const ABLATION: &str = "ablation.json";
pub const MEMORY_JSON: &str = "memory.json";
pub const MEMORY_CSV: &str = "memory.csv";

/// Which adapter checkpoint a step reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    fn file(self) -> &'static str {
        match self {
            Stage::One => STAGE1,
            Stage::Two => STAGE2,
        }
    }
}

/// Recall sweep with trained adapters and with a fresh initialization per
/// question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub trained: MetricsReport,
    pub untrained: MetricsReport,
}

pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Invalid(format!("{} is missing; run the earlier steps first", p.display())))
        }
    }

    fn encoder(&self) -> TextEncoder {
        TextEncoder::new(self.config.model.enc_dim, self.config.data.seed)
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Ok(serde_json::from_str(&std::fs::read_to_string(self.require(LEXICON)?)?)?)
    }

    pub fn universe(&self) -> Result<KbStore> {
        read_entries(&self.require(ENTRIES)?, &self.encoder())
    }

    pub fn train_qa(&self) -> Result<Vec<QaExample>> {
        read_qa(&self.require(QA_TRAIN)?)
    }

    pub fn test_qa(&self) -> Result<Vec<QaExample>> {
        read_qa(&self.require(QA_TEST)?)
    }

    pub fn model(&self) -> Result<Model> {
        load_model(&self.require(MODEL)?)
    }

    pub fn adapters(&self, model: &Model, stage: Stage) -> Result<AdapterSet> {
        load_checkpoint(&self.require(stage.file())?, Some(&model.config))
    }

    pub fn layer_table(&self) -> Result<LayerTable> {
        Ok(serde_json::from_str(&std::fs::read_to_string(self.require(LAYER_TABLE)?)?)?)
    }

    pub fn gen_data(&self) -> Result<()> {
        let corpus = generate_corpus(&self.config.data, &self.encoder())?;
        std::fs::write(self.path(LEXICON), serde_json::to_string_pretty(&corpus.lexicon)?)?;
        write_triples(&self.path(TRIPLES), &corpus.triples)?;
        write_entries(&self.path(ENTRIES), &corpus.kb)?;
        write_qa(&self.path(QA_TRAIN), &corpus.train)?;
        write_qa(&self.path(QA_TEST), &corpus.test)?;
        log::info!(
            "{} triples, {} KB entries, {} train and {} test questions",
            corpus.triples.len(),
            corpus.kb.len(),
            corpus.train.len(),
            corpus.test.len()
        );
        Ok(())
    }

    /// Pretrains the backbone and writes its snapshot.
    pub fn pretrain(&self) -> Result<Model> {
        let cfg = &self.config;
        let lexicon = self.lexicon()?;
        let vocab = Vocab::new(lexicon.words());
        let mcfg = cfg.model.with_vocab(vocab.len());
        let backbone = Backbone::init(&mcfg, &vocab, Some(&self.encoder()), cfg.seed)?;
        let mut model = Model::new(mcfg, vocab, backbone, cfg.data.seed)?;
        let curve = pretrain_backbone(&mut model, &lexicon, cfg.data.id_len, &cfg.pretrain)?;
        write_curve_csv(&self.path(PRETRAIN_LOSS), &curve)?;
        save_model(&model, &self.path(MODEL))?;
        Ok(model)
    }

    /// Pretrains the backbone (or loads the existing snapshot when
    /// `keep_backbone` is set), then trains adapters with the LM loss only.
    pub fn train_stage1(&self, keep_backbone: bool) -> Result<()> {
        let model = if keep_backbone && self.path(MODEL).exists() { self.model()? } else { self.pretrain()? };
        let universe = self.universe()?;
        let train = self.train_qa()?;
        let mut adapters = init_adapters(&model, self.config.stage1.seed)?;
        let curve = stage1_train(&model, &mut adapters, &train, &universe, &self.config.stage1)?;
        write_curve_csv(&self.path(STAGE1_LOSS), &curve)?;
        save_checkpoint(&adapters, model.config.heads, &self.path(STAGE1))
    }

    pub fn identify_layer(&self) -> Result<LayerTable> {
        let cfg = &self.config;
        let model = self.model()?;
        let adapters = self.adapters(&model, Stage::One)?;
        let universe = self.universe()?;
        let train = self.train_qa()?;
        let probe: Vec<QaExample> = train.into_iter().take(cfg.identify.probe).collect();
        let table = identify_retrieval_layer(
            &model,
            &adapters,
            &probe,
            &universe,
            cfg.identify.negatives,
            cfg.identify.seed,
            cfg.threads,
        )?;
        table.write_json(&self.path(LAYER_TABLE))?;
        log::info!("retrieval layer {}", table.best);
        Ok(table)
    }

    /// Continues from the stage-1 adapters with the attention loss added.
    pub fn train_stage2(&self) -> Result<()> {
        let model = self.model()?;
        let mut adapters = self.adapters(&model, Stage::One)?;
        let layer = self.layer_table()?.best;
        let universe = self.universe()?;
        let train = self.train_qa()?;
        let curve = stage2_train(&model, &mut adapters, layer, &train, &universe, &self.config.stage2)?;
        write_curve_csv(&self.path(STAGE2_LOSS), &curve)?;
        save_checkpoint(&adapters, model.config.heads, &self.path(STAGE2))
    }

    /// Held-out evaluation of `stage`'s adapters. Stage-two results go to the
    /// metrics files; stage one gets a `_stage1` suffix.
    pub fn eval(&self, stage: Stage) -> Result<MetricsReport> {
        let model = self.model()?;
        let adapters = self.adapters(&model, stage)?;
        let layer = self.layer_table()?.best;
        let ecfg = self.config.eval.resolve(layer, true, self.config.threads);
        let report = run_eval(&model, &adapters, &self.test_qa()?, &self.universe()?, &ecfg)?;
        let (json, csv) = match stage {
            Stage::Two => (METRICS_JSON.to_string(), METRICS_CSV.to_string()),
            Stage::One => (suffixed(METRICS_JSON, "_stage1"), suffixed(METRICS_CSV, "_stage1")),
        };
        report.write_json(&self.path(&json))?;
        report.write_csv(&self.path(&csv))?;
        Ok(report)
    }

    /// Recall over growing pools, without decoding.
    pub fn scaling(&self) -> Result<ScalingReport> {
        let model = self.model()?;
        let adapters = self.adapters(&model, Stage::Two)?;
        let layer = self.layer_table()?.best;
        let ecfg = self.config.scaling.resolve(layer, false, self.config.threads);
        let qa = self.test_qa()?;
        let universe = self.universe()?;
        let trained = run_eval(&model, &adapters, &qa, &universe, &ecfg)?;
        let base = self.config.stage1.seed;
        let draw = |s: u64| init_adapters(&model, base ^ s);
        let untrained = run_eval_per_example(&model, &draw, &qa, &universe, &ecfg)?;
        let report = ScalingReport { trained, untrained };
        std::fs::write(self.path(SCALING), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    /// Compression modes compared by decoding held-out questions.
    pub fn ablate(&self) -> Result<MetricsReport> {
        let model = self.model()?;
        let adapters = self.adapters(&model, Stage::Two)?;
        let layer = self.layer_table()?.best;
        let ecfg = self.config.ablation.resolve(layer, true, self.config.threads);
        let report = run_eval(&model, &adapters, &self.test_qa()?, &self.universe()?, &ecfg)?;
        std::fs::write(self.path(ABLATION), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    /// Analytic cache footprint of every mode at each pool size. Uses the
    /// identified layer when one exists, else layer 0.
    pub fn bench_memory(&self) -> Result<Vec<MemoryRow>> {
        let cfg = &self.config;
        let layer = if self.path(LAYER_TABLE).exists() { self.layer_table()?.best } else { 0 };
        let mut rows = Vec::new();
        for &m in &cfg.memory.pool_sizes {
            for mode in CompressionMode::ALL {
                let policy = match mode {
                    CompressionMode::None => CompressionPolicy::none(),
                    _ => CompressionPolicy::new(mode, cfg.memory.k, layer),
                };
                let estimate =
                    memory_model(m, cfg.memory.tokens, cfg.model.width, cfg.model.layers, &policy, cfg.memory.chunk)?;
                let k = if mode == CompressionMode::None { m } else { policy.k.min(m) };
                rows.push(MemoryRow { pool_size: m, policy: mode.name().to_string(), k, estimate });
            }
        }
        std::fs::write(self.path(MEMORY_JSON), serde_json::to_string_pretty(&rows)?)?;
        let mut w = csv::Writer::from_path(self.path(MEMORY_CSV))?;
        w.write_record(["pool_size", "policy", "k", "pre_selection_peak", "post_selection_steady", "kb_steady", "kb_per_post_layer"])?;
        for r in &rows {
            let e = &r.estimate;
            w.write_record([
                r.pool_size.to_string(),
                r.policy.clone(),
                r.k.to_string(),
                e.pre_selection_peak.to_string(),
                e.post_selection_steady.to_string(),
                e.kb_steady.to_string(),
                e.kb_per_post_layer.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(rows)
    }

    /// Every step in order.
    pub fn all(&self) -> Result<()> {
        self.gen_data()?;
        self.train_stage1(false)?;
        self.identify_layer()?;
        self.eval(Stage::One)?;
        self.train_stage2()?;
        self.eval(Stage::Two)?;
        self.scaling()?;
        self.ablate()?;
        self.bench_memory()?;
        Ok(())
    }
}

fn suffixed(name: &str, suffix: &str) -> String {
    match name.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}{suffix}.{ext}"),
        None => format!("{name}{suffix}"),
    }
}
