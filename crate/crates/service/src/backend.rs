//! Model backends the lifecycle engine can drive.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use ibn_core::pipeline::{
    self, evaluate, train_tagger, EvalMetrics, LabeledSentence, Mode, NerModel, Task, TrainConfig,
};
use ibn_core::tensor::RngState;
use ibn_core::tokenizer::{Doc, Span};

/// Prediction, retraining and persistence for one kind of model.
pub trait Backend: Send + Sync + 'static {
    type Model: Send + Sync + 'static;

    fn predict(&self, model: &Self::Model, text: &str) -> Result<Doc>;

    /// Produces a new model from `base` and the refinement dataset. `base`
    /// is left untouched.
    fn retrain(&self, base: &Self::Model, dataset: &[LabeledSentence]) -> Result<(Self::Model, EvalMetrics)>;

    fn save(&self, model: &Self::Model, path: &Path) -> Result<()>;

    fn load(&self, path: &Path) -> Result<Self::Model>;
}

/// Retraining schedule for the neural backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub mode: Mode,
    /// Generated sentences mixed in to keep the model from forgetting.
    pub background_size: usize,
    /// Times each correction is repeated per epoch.
    pub correction_repeats: usize,
    pub train: TrainConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FineTune,
            background_size: 300,
            correction_repeats: 8,
            train: TrainConfig {
                epochs: 4,
                learning_rate: 0.03,
                plateau_patience: None,
                ..TrainConfig::default()
            },
        }
    }
}

/// The transformer tagger. Retraining warm-starts from the active model on
/// the corrections plus a sample of generated sentences.
#[derive(Clone, Debug)]
pub struct NeuralBackend {
    pub background: Vec<LabeledSentence>,
    pub holdout: Vec<LabeledSentence>,
    pub config: RetrainConfig,
}

impl NeuralBackend {
    pub fn new(config: RetrainConfig, seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed ^ 0x7265_7472);
        let templates = pipeline::default_templates();
        let background = pipeline::generate_corpus(&templates, &mut rng, config.background_size.max(1))?;
        let holdout = pipeline::generate_corpus(&templates, &mut rng, 100)?;
        Ok(Self {
            background,
            holdout,
            config,
        })
    }
}

impl Backend for NeuralBackend {
    type Model = NerModel;

    fn predict(&self, model: &NerModel, text: &str) -> Result<Doc> {
        Ok(pipeline::predict(model, text)?)
    }

    fn retrain(&self, base: &NerModel, dataset: &[LabeledSentence]) -> Result<(NerModel, EvalMetrics)> {
        if dataset.is_empty() {
            bail!("refinement dataset is empty");
        }
        let mut train = self.background.clone();
        for _ in 0..self.config.correction_repeats.max(1) {
            train.extend(dataset.iter().cloned());
        }
        let mut model = base.clone();
        train_tagger(&mut model, &train, &[], Task::Ner, self.config.mode, &self.config.train)?;
        let mut metrics = evaluate(&model, &self.holdout)?;
        let on_corrections = evaluate(&model, dataset)?;
        metrics.train_loss = None;
        if on_corrections.f1 < 1.0 {
            tracing::warn!(f1 = on_corrections.f1, "retrained model does not reproduce every correction");
        }
        Ok((model, metrics))
    }

    fn save(&self, model: &NerModel, path: &Path) -> Result<()> {
        Ok(model.save(path)?)
    }

    fn load(&self, path: &Path) -> Result<NerModel> {
        Ok(NerModel::load(path)?)
    }
}

/// Word-to-group lookup table standing in for a trained model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(w, g)| (w.to_lowercase(), g.to_string()))
                .collect(),
        }
    }
}

/// Cheap deterministic backend: every known word becomes a one-token span.
/// Retraining learns each corrected span's words. Used for lifecycle tests.
#[derive(Clone, Debug)]
pub struct LexiconBackend {
    pub confidence: f64,
    /// Retraining fails when the dataset mentions this word.
    pub poison: Option<String>,
}

impl Default for LexiconBackend {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            poison: None,
        }
    }
}

impl Backend for LexiconBackend {
    type Model = Lexicon;

    fn predict(&self, model: &Lexicon, text: &str) -> Result<Doc> {
        let mut doc = Doc::from_text(text);
        let mut spans = Vec::new();
        for (i, s) in doc.sentences.iter().enumerate() {
            for (t, tok) in s.tokens.iter().enumerate() {
                if let Some(g) = model.entries.get(&tok.text.to_lowercase()) {
                    let mut span = Span::over(i, s, t, t + 1, g.clone())?;
                    span.confidence = Some(self.confidence);
                    spans.push(span);
                }
            }
        }
        doc.set_spans(spans)?;
        Ok(doc)
    }

    fn retrain(&self, base: &Lexicon, dataset: &[LabeledSentence]) -> Result<(Lexicon, EvalMetrics)> {
        if dataset.is_empty() {
            bail!("refinement dataset is empty");
        }
        let mut model = base.clone();
        for s in dataset {
            if let Some(p) = &self.poison {
                if s.tokens.iter().any(|t| t.eq_ignore_ascii_case(p)) {
                    bail!("training diverged");
                }
            }
            for span in &s.spans {
                for w in &s.tokens[span.token_start..span.token_end] {
                    model.entries.insert(w.to_lowercase(), span.group.clone());
                }
            }
        }
        Ok((model, EvalMetrics::default()))
    }

    fn save(&self, model: &Lexicon, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, serde_json::to_vec(model)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<Lexicon> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
