//! Masked-language-model pretraining, tagger training, prediction and
//! span-level evaluation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, OptimizerKind, OptimizerState, Plateau};
use crate::params::{ParamBinder, Parameters};
use crate::pipeline::corpus::{bio_label, LabeledSentence};
use crate::pipeline::model::{NerModel, ENCODER_PREFIXES};
use crate::tensor::{row_softmax, Matrix, RngState};
use crate::tokenizer::{self, BioTag, Doc, PosTag, Token, CLS_ID, MASK_ID, SEP_ID};

/// Optimizer and schedule settings shared by all training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gradients are rescaled when their global norm exceeds this.
    pub max_grad_norm: Option<f64>,
    /// Halve the learning rate after this many epochs without improvement.
    pub plateau_patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            max_grad_norm: Some(5.0),
            plateau_patience: Some(2),
            seed: 42,
        }
    }
}

impl TrainConfig {
    fn optimizer(&self) -> Result<OptimizerState> {
        let kind = if self.momentum > 0.0 {
            OptimizerKind::Momentum { beta: self.momentum }
        } else {
            OptimizerKind::Plain
        };
        OptimizerState::new(kind, self.learning_rate, self.plateau_patience.map(|p| Plateau::new(0.5, p)))
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

pub const MASK_RATE: f64 = 0.15;

/// Number of positions masked among `usable` non-special pieces.
pub fn mask_count(usable: usize, rate: f64) -> usize {
    ((usable as f64 * rate).ceil() as usize).min(usable)
}

/// Distinct positions in `1..=usable` (skipping `[CLS]` at 0), sorted.
pub fn mask_positions(usable: usize, rate: f64, rng: &mut RngState) -> Vec<usize> {
    let mut idx: Vec<usize> = (1..=usable).collect();
    rng.shuffle(&mut idx);
    idx.truncate(mask_count(usable, rate));
    idx.sort_unstable();
    idx
}

/// Loss curve of a pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    /// Mean masked loss before any update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub sentences_used: usize,
    pub sentences_skipped: usize,
}

fn mlm_ids(model: &NerModel, corpus: &[LabeledSentence]) -> (Vec<Vec<usize>>, usize) {
    let max = model.geometry.max_len;
    let mut kept = Vec::new();
    let mut skipped = 0;
    for s in corpus {
        let (pieces, _) = model.vocab.segment_words(&s.sentence().tokens);
        let mut ids = vec![CLS_ID];
        ids.extend(pieces.into_iter().take(max - 2));
        ids.push(SEP_ID);
        if ids.len() - 2 < 3 {
            skipped += 1;
        } else {
            kept.push(ids);
        }
    }
    (kept, skipped)
}

fn masked(ids: &[usize], positions: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = ids.to_vec();
    let targets = positions
        .iter()
        .map(|&p| {
            input[p] = MASK_ID;
            Some(ids[p])
        })
        .collect();
    (input, targets)
}

fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> f64 {
    let probs = row_softmax(logits);
    let mut total = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            total -= probs.get(r, *t).max(f64::MIN_POSITIVE).ln();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Masked-token loss of one sentence without building a tape.
pub fn mlm_loss(model: &NerModel, ids: &[usize], positions: &[usize]) -> Result<f64> {
    let (input, targets) = masked(ids, positions);
    let h = model.encode(&input)?;
    let logits = model.mlm_head.forward(&h.gather_rows(positions)?)?;
    Ok(cross_entropy(&logits, &targets))
}

/// Running sum of named gradients over a mini-batch.
#[derive(Default)]
struct GradAccumulator {
    sums: HashMap<String, Matrix>,
    count: usize,
}

impl GradAccumulator {
    fn add(&mut self, grads: HashMap<String, Matrix>) -> Result<()> {
        for (name, g) in grads {
            match self.sums.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.sums.insert(name, g);
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Averages, clips and applies the batch, then resets.
    fn apply(&mut self, model: &mut NerModel, opt: &mut OptimizerState, max_norm: Option<f64>) -> Result<()> {
        if self.count == 0 {
            return Ok(());
        }
        let mut scale = 1.0 / self.count as f64;
        if let Some(max) = max_norm {
            // Visit in model order so the sum is reproducible.
            let mut sq = 0.0;
            model.visit_params(&mut |name, _| {
                if let Some(g) = self.sums.get(name) {
                    sq += g.data().iter().map(|v| v * v).sum::<f64>();
                }
            });
            let norm = sq.sqrt() * scale;
            if norm > max {
                scale *= max / norm;
            }
        }
        for g in self.sums.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        opt.step(model, &self.sums)?;
        self.sums.clear();
        self.count = 0;
        Ok(())
    }
}

/// Pretrains embedding, encoder and MLM head by masked-token prediction.
pub fn pretrain_mlm(model: &mut NerModel, corpus: &[LabeledSentence], cfg: &TrainConfig) -> Result<MlmReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }
    let (sentences, skipped) = mlm_ids(model, corpus);
    if sentences.is_empty() {
        return Err(Error::Corpus("no sentence has 3 or more usable pieces".into()));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut probe_rng = rng.fork(0x6d6c6d);
    let mut initial = 0.0;
    for ids in &sentences {
        let pos = mask_positions(ids.len() - 2, MASK_RATE, &mut probe_rng);
        initial += mlm_loss(model, ids, &pos)?;
    }
    let initial_loss = initial / sentences.len() as f64;

    let mut opt = cfg.optimizer()?;
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut acc = GradAccumulator::default();
        for (k, &i) in order.iter().enumerate() {
            let ids = &sentences[i];
            let positions = mask_positions(ids.len() - 2, MASK_RATE, &mut rng);
            let (input, targets) = masked(ids, &positions);
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new();
            let h = model.encode_on_tape(&mut tape, &mut binder, &input)?;
            let rows = tape.embed_lookup(h, positions);
            let logits = model.mlm_head.on_tape(&mut tape, &mut binder, "mlm_head", rows);
            tape.cross_entropy(logits, targets);
            total += tape.forward_no_inputs()?.item();
            acc.add(binder.into_named_grads(tape.backward()?))?;
            if acc.count == cfg.batch_size || k + 1 == order.len() {
                acc.apply(model, &mut opt, cfg.max_grad_norm)?;
            }
        }
        let mean = total / sentences.len() as f64;
        opt.end_epoch(mean);
        epoch_losses.push(mean);
    }
    Ok(MlmReport {
        initial_loss,
        epoch_losses,
        sentences_used: sentences.len(),
        sentences_skipped: skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pos,
    Ner,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Task::Pos),
            "ner" => Ok(Task::Ner),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every parameter on the path to the loss is updated.
    FineTune,
    /// Embedding and encoder frozen; only the task head learns.
    FeatureBased,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine_tune" => Ok(Mode::FineTune),
            "feature_based" => Ok(Mode::FeatureBased),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

/// Span-exact micro scores plus POS accuracy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pos_accuracy: Option<f64>,
    pub sentences: usize,
    /// Mean training loss of the epoch that produced these metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mlm_loss: Vec<f64>,
}

/// Matched, predicted and gold span counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn add(&mut self, gold: &[tokenizer::Span], predicted: &[tokenizer::Span]) {
        let key = |s: &tokenizer::Span| (s.token_start, s.token_end, s.group.clone());
        let gold_set: BTreeSet<_> = gold.iter().map(key).collect();
        self.correct += predicted.iter().filter(|s| gold_set.contains(&key(s))).count();
        self.predicted += predicted.len();
        self.gold += gold.len();
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-word predictions for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTags {
    pub ner: Vec<usize>,
    pub ner_prob: Vec<f64>,
    pub pos: Vec<PosTag>,
}

/// Tags pre-split words, windowing long inputs so each window fits the
/// model's maximum length.
pub fn tag_words(model: &NerModel, words: &[Token]) -> Result<WordTags> {
    let budget = model.geometry.max_len - 2;
    let mut out = WordTags {
        ner: Vec::with_capacity(words.len()),
        ner_prob: Vec::with_capacity(words.len()),
        pos: Vec::with_capacity(words.len()),
    };
    let segmented: Vec<Vec<usize>> = words.iter().map(|w| model.vocab.segment_word(&w.text)).collect();
    let mut start = 0;
    while start < words.len() {
        let mut ids = vec![CLS_ID];
        let mut rows = Vec::new();
        let mut end = start;
        while end < words.len() {
            let pieces = &segmented[end];
            let room = budget - (ids.len() - 1);
            if pieces.len() > room && end > start {
                break;
            }
            rows.push(ids.len());
            ids.extend(pieces.iter().take(room));
            end += 1;
            if ids.len() - 1 == budget {
                break;
            }
        }
        ids.push(SEP_ID);
        let h = model.encode(&ids)?.gather_rows(&rows)?;
        let ner = row_softmax(&model.ner_head.forward(&h)?);
        let pos = model.pos_head.forward(&h)?;
        for r in 0..rows.len() {
            let (label, prob) = argmax(ner.row(r));
            out.ner.push(label);
            out.ner_prob.push(prob);
            out.pos.push(PosTag::ALL[argmax(pos.row(r)).0]);
        }
        start = end;
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

fn decode_spans(index: usize, sentence: &tokenizer::Sentence, tags: &WordTags) -> Result<Vec<tokenizer::Span>> {
    let labels: Vec<BioTag> = tags.ner.iter().map(|&l| bio_label(l)).collect();
    let mut spans = tokenizer::bio_to_spans(index, sentence, &labels)?;
    for s in &mut spans {
        let probs = &tags.ner_prob[s.token_start..s.token_end];
        let log_mean = probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64;
        s.confidence = Some(log_mean.exp().clamp(f64::MIN_POSITIVE, 1.0));
    }
    Ok(spans)
}

/// Segments, tags and decodes `text` into a document with POS tags and
/// entity spans carrying confidences.
pub fn predict(model: &NerModel, text: &str) -> Result<Doc> {
    let mut doc = Doc::from_text(text);
    let mut spans = Vec::new();
    for (i, sentence) in doc.sentences.iter_mut().enumerate() {
        let tags = tag_words(model, &sentence.tokens)?;
        spans.extend(decode_spans(i, sentence, &tags)?);
        sentence.pos_tags = Some(tags.pos);
    }
    doc.set_spans(spans)?;
    Ok(doc)
}

/// Span-exact micro P/R/F1 over the dataset, plus POS accuracy over the
/// sentences that carry gold tags.
pub fn evaluate(model: &NerModel, dataset: &[LabeledSentence]) -> Result<EvalMetrics> {
    let mut counts = SpanCounts::default();
    let (mut pos_hit, mut pos_total) = (0usize, 0usize);
    for s in dataset {
        let sentence = s.sentence();
        let tags = tag_words(model, &sentence.tokens)?;
        counts.add(&s.doc_spans(), &decode_spans(0, &sentence, &tags)?);
        if let Some(gold) = &s.pos {
            pos_hit += gold.iter().zip(&tags.pos).filter(|(a, b)| a == b).count();
            pos_total += gold.len();
        }
    }
    Ok(EvalMetrics {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        pos_accuracy: (pos_total > 0).then(|| pos_hit as f64 / pos_total as f64),
        sentences: dataset.len(),
        train_loss: None,
        mlm_loss: Vec::new(),
    })
}

/// Seeded shuffle, then the first `ceil(dev_fraction * n)` go to dev.
pub fn split_dataset(dataset: &[LabeledSentence], dev_fraction: f64, seed: u64) -> (Vec<LabeledSentence>, Vec<LabeledSentence>) {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    RngState::new(seed).shuffle(&mut idx);
    let n_dev = ((dataset.len() as f64 * dev_fraction).ceil() as usize).min(dataset.len());
    let dev = idx[..n_dev].iter().map(|&i| dataset[i].clone()).collect();
    let train = idx[n_dev..].iter().map(|&i| dataset[i].clone()).collect();
    (train, dev)
}

fn head_of(model: &NerModel, task: Task) -> (&DenseLayer, &'static str) {
    match task {
        Task::Pos => (&model.pos_head, "pos_head"),
        Task::Ner => (&model.ner_head, "ner_head"),
    }
}

/// Trains one head on `train`, measuring on `dev` after every epoch.
pub fn train_tagger(
    model: &mut NerModel,
    train: &[LabeledSentence],
    dev: &[LabeledSentence],
    task: Task,
    mode: Mode,
    cfg: &TrainConfig,
) -> Result<Vec<EvalMetrics>> {
    cfg.validate()?;
    let max = model.geometry.max_len;
    let mut examples = Vec::new();
    for s in train {
        if task == Task::Pos && s.pos.is_none() {
            continue;
        }
        let enc = s.encode(&model.vocab, max)?;
        let labels = match task {
            Task::Pos => enc.pos_labels,
            Task::Ner => enc.ner_labels,
        };
        if labels.iter().any(Option::is_some) {
            examples.push((enc.ids, labels));
        }
    }
    if examples.is_empty() {
        return Err(Error::Corpus("no labeled training sentences".into()));
    }
    // Frozen encoder: representations never change, so compute them once.
    let features = match mode {
        Mode::FeatureBased => Some(
            examples
                .iter()
                .map(|(ids, _)| model.encode(ids))
                .collect::<Result<Vec<_>>>()?,
        ),
        Mode::FineTune => None,
    };

    let mut rng = RngState::new(cfg.seed);
    let mut opt = cfg.optimizer()?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut acc = GradAccumulator::default();
        for (k, &i) in order.iter().enumerate() {
            let (ids, labels) = &examples[i];
            let mut tape = Tape::new();
            let mut binder = match mode {
                Mode::FineTune => ParamBinder::new(),
                Mode::FeatureBased => ParamBinder::with_frozen(ENCODER_PREFIXES),
            };
            let h = match &features {
                Some(f) => tape.constant(f[i].clone()),
                None => model.encode_on_tape(&mut tape, &mut binder, ids)?,
            };
            let (head, name) = head_of(model, task);
            let logits = head.on_tape(&mut tape, &mut binder, name, h);
            tape.cross_entropy(logits, labels.clone());
            total += tape.forward_no_inputs()?.item();
            acc.add(binder.into_named_grads(tape.backward()?))?;
            if acc.count == cfg.batch_size || k + 1 == order.len() {
                acc.apply(model, &mut opt, cfg.max_grad_norm)?;
            }
        }
        let mean = total / examples.len() as f64;
        opt.end_epoch(mean);
        let mut metrics = evaluate(model, dev)?;
        metrics.train_loss = Some(mean);
        history.push(metrics);
    }
    Ok(history)
}
