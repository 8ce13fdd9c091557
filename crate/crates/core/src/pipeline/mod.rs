//! Corpus generation, pretraining, tagging heads, evaluation and intent
//! assembly, plus an end-to-end training driver.

pub mod corpus;
pub mod intent;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

pub use corpus::{
    default_slots, default_templates, generate_corpus, load_corpus, read_jsonl, save_corpus, write_jsonl, EntityGroup,
    GoldSpan, IntentTemplate, LabeledSentence, Source,
};
pub use intent::{assemble_intent, Action, Filters, IntentPayload, Target};
pub use model::{Geometry, NerModel};
pub use train::{
    evaluate, predict, pretrain_mlm, split_dataset, train_tagger, EvalMetrics, MlmReport, Mode, Task, TrainConfig,
};

use crate::error::Result;
use crate::tensor::RngState;
use crate::tokenizer::build_vocab;

/// Settings for a full run: vocabulary, MLM pretraining, NER and POS heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub geometry: Geometry,
    pub vocab_size: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub mlm: TrainConfig,
    pub ner: TrainConfig,
    pub ner_mode: Mode,
    pub pos: TrainConfig,
    pub pos_mode: Mode,
    /// Also train a feature-based NER head from the pretrained encoder and
    /// report its scores.
    pub compare_modes: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::desk(),
            vocab_size: 2000,
            seed: 42,
            dev_fraction: 0.1,
            mlm: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            ner: TrainConfig {
                epochs: 5,
                seed: 43,
                ..TrainConfig::default()
            },
            ner_mode: Mode::FineTune,
            pos: TrainConfig {
                epochs: 5,
                seed: 44,
                ..TrainConfig::default()
            },
            pos_mode: Mode::FeatureBased,
            compare_modes: false,
        }
    }
}

impl PipelineConfig {
    /// Same settings with every stage reseeded from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mlm.seed = seed;
        self.ner.seed = seed.wrapping_add(1);
        self.pos.seed = seed.wrapping_add(2);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mlm: MlmReport,
    pub ner_history: Vec<EvalMetrics>,
    pub pos_history: Vec<EvalMetrics>,
    /// Final scores on the held-out split.
    pub dev: EvalMetrics,
    pub feature_based_ner: Option<EvalMetrics>,
    pub train_sentences: usize,
    pub dev_sentences: usize,
}

/// Builds the vocabulary from the training split, pretrains with MLM, then
/// trains the NER head and the POS head in their configured modes.
pub fn train_pipeline(corpus: &[LabeledSentence], cfg: &PipelineConfig) -> Result<(NerModel, PipelineReport)> {
    let (train, dev) = split_dataset(corpus, cfg.dev_fraction, cfg.seed);
    let texts: Vec<&str> = train.iter().map(|s| s.text.as_str()).collect();
    let vocab = build_vocab(&texts, cfg.vocab_size)?;
    let mut model = NerModel::new(vocab, cfg.geometry, &mut RngState::new(cfg.seed))?;
    let mlm = pretrain_mlm(&mut model, &train, &cfg.mlm)?;

    let feature_based_ner = if cfg.compare_modes {
        let mut probe = model.clone();
        let h = train_tagger(&mut probe, &train, &dev, Task::Ner, Mode::FeatureBased, &cfg.ner)?;
        h.last().cloned()
    } else {
        None
    };
    let ner_history = train_tagger(&mut model, &train, &dev, Task::Ner, cfg.ner_mode, &cfg.ner)?;
    let pos_history = train_tagger(&mut model, &train, &dev, Task::Pos, cfg.pos_mode, &cfg.pos)?;
    let mut dev_metrics = evaluate(&model, &dev)?;
    dev_metrics.mlm_loss = mlm.epoch_losses.clone();
    Ok((
        model,
        PipelineReport {
            mlm,
            ner_history,
            pos_history,
            dev: dev_metrics,
            feature_based_ner,
            train_sentences: train.len(),
            dev_sentences: dev.len(),
        },
    ))
}
