//! Intent lifecycle: submission, recognition, refinement by operator
//! corrections, retraining with atomic model swaps, and the simulated inner
//! loop. All mutations go through one lock and are logged before they are
//! applied in memory.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ibn_core::pipeline::{assemble_intent, EntityGroup, EvalMetrics, GoldSpan, IntentPayload, LabeledSentence, Source};
use ibn_core::tokenizer::{char_slice, Doc, Span};
use ibn_core::Error as CoreError;

use crate::backend::Backend;
use crate::inventory::{ActivationReport, Inventory};
use crate::store::{JsonlLog, Layout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntentState {
    Received,
    Recognized,
    NeedsRefinement,
    Translated,
    Activated,
    Failed,
}

impl IntentState {
    pub const ALL: [IntentState; 6] = [
        IntentState::Received,
        IntentState::Recognized,
        IntentState::NeedsRefinement,
        IntentState::Translated,
        IntentState::Activated,
        IntentState::Failed,
    ];

    /// Legal edges of the lifecycle graph.
    pub fn can_transition_to(self, next: IntentState) -> bool {
        use IntentState::*;
        match (self, next) {
            (Failed, _) => false,
            (_, Failed) => true,
            (Received, Recognized)
            | (Recognized, NeedsRefinement)
            | (Recognized, Translated)
            | (NeedsRefinement, Recognized)
            | (Translated, Activated) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Option<IntentState>,
    pub to: IntentState,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub doc: Doc,
    pub payload: IntentPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub key: String,
    pub spans: Vec<Span>,
    pub author: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub id: String,
    pub text: String,
    pub state: IntentState,
    pub extraction: Option<Extraction>,
    pub corrections: Vec<Correction>,
    pub model_version: Option<String>,
    pub activation: Option<ActivationReport>,
    pub failure: Option<String>,
    pub history: Vec<Transition>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl IntentRecord {
    fn new(text: &str) -> Self {
        let now = Utc::now();
        Self {
            id: String::new(),
            text: text.to_string(),
            state: IntentState::Received,
            extraction: None,
            corrections: Vec::new(),
            model_version: None,
            activation: None,
            failure: None,
            history: vec![Transition {
                from: None,
                to: IntentState::Received,
                at: now,
            }],
            created_at: now,
            updated_at: now,
        }
    }

    fn transition(&mut self, to: IntentState) -> Result<(), EngineError> {
        if !self.state.can_transition_to(to) {
            return Err(EngineError::InvalidState(format!(
                "intent {} cannot move from {:?} to {:?}",
                self.id, self.state, to
            )));
        }
        let at = Utc::now();
        self.history.push(Transition {
            from: Some(self.state),
            to,
            at,
        });
        self.state = to;
        self.updated_at = at;
        Ok(())
    }

    /// True when every recorded edge is legal and the chain is unbroken.
    pub fn history_is_legal(&self) -> bool {
        let mut prev = None;
        for t in &self.history {
            let ok = match (prev, t.from) {
                (None, None) => t.to == IntentState::Received,
                (Some(p), Some(f)) => p == f && f.can_transition_to(t.to),
                _ => false,
            };
            if !ok {
                return false;
            }
            prev = Some(t.to);
        }
        prev == Some(self.state)
    }
}

/// A span as submitted by an operator. Character offsets are optional; when
/// present they must agree with the token range.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanInput {
    #[serde(default)]
    pub sentence: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub group: String,
    #[serde(default)]
    pub char_start: Option<usize>,
    #[serde(default)]
    pub char_end: Option<usize>,
}

/// Full replacement span list for an intent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub spans: Vec<SpanInput>,
    #[serde(default)]
    pub author: Option<String>,
}

/// A refinement-dataset entry, keyed by intent id and span content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEntry {
    pub key: String,
    pub intent_id: String,
    pub author: Option<String>,
    pub created_at: DateTime<Utc>,
    pub spans: Vec<Span>,
    pub sentences: Vec<LabeledSentence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub id: String,
    pub checkpoint: Option<String>,
    pub metrics: Option<EvalMetrics>,
    /// Refinement-dataset entries the version was trained with.
    pub trained_on: usize,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RegistryEvent {
    Registered { version: ModelVersion },
    Activated { id: String, at: DateTime<Utc> },
    Failed { reason: String, at: DateTime<Utc> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainFailure {
    pub reason: String,
    pub at: Option<DateTime<Utc>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub versions: Vec<ModelVersion>,
    pub active: String,
    pub failures: Vec<RetrainFailure>,
}

impl Registry {
    fn apply(&mut self, event: &RegistryEvent) {
        match event {
            RegistryEvent::Registered { version } => self.versions.push(version.clone()),
            RegistryEvent::Activated { id, .. } => self.active = id.clone(),
            RegistryEvent::Failed { reason, at } => self.failures.push(RetrainFailure {
                reason: reason.clone(),
                at: Some(*at),
            }),
        }
    }

    pub fn active_version(&self) -> Option<&ModelVersion> {
        self.versions.iter().find(|v| v.id == self.active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub confidence_threshold: f64,
    pub max_text_len: usize,
    /// Retrain automatically after this many new corrections.
    pub trigger_k: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            max_text_len: 512,
            trigger_k: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    InvalidState(String),
    #[error("{0}")]
    Overlap(String),
    #[error("{0}")]
    Precondition(String),
    #[error("a retraining run is already in progress")]
    Busy,
    #[error("retraining failed: {0}")]
    RetrainFailed(String),
    #[error("{0}")]
    Internal(String),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Validation(_) => "validation_error",
            EngineError::NotFound(_) => "not_found",
            EngineError::InvalidState(_) => "invalid_state",
            EngineError::Overlap(_) => "overlapping_spans",
            EngineError::Precondition(_) => "precondition_failed",
            EngineError::Busy => "retrain_in_progress",
            EngineError::RetrainFailed(_) => "retrain_failed",
            EngineError::Internal(_) => "internal_error",
        }
    }
}

impl From<anyhow::Error> for EngineError {
    fn from(e: anyhow::Error) -> Self {
        EngineError::Internal(format!("{e:#}"))
    }
}

type EngineResult<T> = Result<T, EngineError>;

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionOutcome {
    pub record: IntentRecord,
    /// The automatic retraining threshold has been reached.
    pub retrain_due: bool,
    /// The same span set was already the intent's latest correction.
    pub duplicate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub intents: usize,
    pub by_state: BTreeMap<IntentState, usize>,
    pub corrections: usize,
    pub dataset_sentences: usize,
    pub corrections_since_retrain: usize,
    pub active_version: String,
    pub versions: usize,
    pub failed_retrains: usize,
    pub active_metrics: Option<EvalMetrics>,
}

/// Everything the logs determine; equal snapshots mean equal state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub intents: BTreeMap<String, IntentRecord>,
    pub corrections: Vec<CorrectionEntry>,
    pub registry: Registry,
}

impl Snapshot {
    /// Rebuilds state from the logs in `dir`.
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let layout = Layout::new(dir)?;
        let mut intents = BTreeMap::new();
        for r in JsonlLog::replay::<IntentRecord>(&layout.intents())? {
            intents.insert(r.id.clone(), r);
        }
        let corrections = JsonlLog::replay(&layout.corrections())?;
        let mut registry = Registry::default();
        for e in JsonlLog::replay::<RegistryEvent>(&layout.registry())? {
            registry.apply(&e);
        }
        Ok(Self {
            intents,
            corrections,
            registry,
        })
    }
}

struct Logs {
    layout: Layout,
    intents: JsonlLog,
    corrections: JsonlLog,
    registry: JsonlLog,
}

struct Inner {
    state: Snapshot,
    keys: HashSet<String>,
    next_id: u64,
    logs: Option<Logs>,
}

impl Inner {
    fn persist_intent(&mut self, r: &IntentRecord) -> EngineResult<()> {
        if let Some(l) = &mut self.logs {
            l.intents.append(r)?;
        }
        Ok(())
    }

    fn record_registry(&mut self, e: RegistryEvent) -> EngineResult<()> {
        if let Some(l) = &mut self.logs {
            l.registry.append(&e)?;
        }
        self.state.registry.apply(&e);
        Ok(())
    }

    fn since_retrain(&self) -> usize {
        let trained = self.state.registry.active_version().map_or(0, |v| v.trained_on);
        self.state.corrections.len().saturating_sub(trained)
    }
}

/// The model currently serving predictions.
pub struct Active<M> {
    pub version: String,
    pub model: M,
}

pub struct Engine<B: Backend> {
    backend: B,
    config: EngineConfig,
    inventory: Inventory,
    inner: Mutex<Inner>,
    active: RwLock<Arc<Active<B::Model>>>,
    retraining: Mutex<()>,
}

fn hash_key(intent_id: &str, spans: &[Span]) -> String {
    let mut h = Sha256::new();
    h.update(intent_id.as_bytes());
    for s in spans {
        h.update(format!("\n{}:{}:{}:{}", s.sentence, s.token_start, s.token_end, s.group).as_bytes());
    }
    hex::encode(h.finalize())
}

fn sentence_examples(doc: &Doc, spans: &[Span]) -> EngineResult<Vec<LabeledSentence>> {
    doc.sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let text = char_slice(&doc.text, s.char_start, s.char_end);
            let gold: Vec<GoldSpan> = spans
                .iter()
                .filter(|sp| sp.sentence == i)
                .map(|sp| GoldSpan {
                    group: sp.group.clone(),
                    token_start: sp.token_start,
                    token_end: sp.token_end,
                    char_start: sp.char_start - s.char_start,
                    char_end: sp.char_end - s.char_start,
                })
                .collect();
            LabeledSentence::from_spans(&text, &gold, None, Source::UserCorrection)
                .map_err(|e| EngineError::Internal(e.to_string()))
        })
        .collect()
}

impl<B: Backend> Engine<B> {
    /// Starts an engine. With a data directory, state is replayed from its
    /// logs and the active checkpoint is loaded; `initial` is needed (and
    /// registered as `v1`) only when the registry is empty.
    pub fn open(
        backend: B,
        initial: Option<B::Model>,
        config: EngineConfig,
        inventory: Inventory,
        data_dir: Option<&Path>,
    ) -> anyhow::Result<Self> {
        let (state, logs) = match data_dir {
            Some(dir) => {
                let state = Snapshot::load(dir)?;
                let layout = Layout::new(dir)?;
                let logs = Logs {
                    intents: JsonlLog::open(layout.intents())?,
                    corrections: JsonlLog::open(layout.corrections())?,
                    registry: JsonlLog::open(layout.registry())?,
                    layout,
                };
                (state, Some(logs))
            }
            None => (Snapshot::default(), None),
        };
        let next_id = state
            .intents
            .keys()
            .filter_map(|k| k.strip_prefix("int-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |n| n + 1);
        let keys = state.corrections.iter().map(|c| c.key.clone()).collect();
        let mut inner = Inner {
            state,
            keys,
            next_id,
            logs,
        };

        let model = if inner.state.registry.versions.is_empty() {
            let initial = initial.ok_or_else(|| anyhow::anyhow!("no model registered yet and none supplied"))?;
            let checkpoint = match &inner.logs {
                Some(l) => {
                    let path = l.layout.checkpoint("v1");
                    backend.save(&initial, &path)?;
                    Some(path.display().to_string())
                }
                None => None,
            };
            let version = ModelVersion {
                id: "v1".into(),
                checkpoint,
                metrics: None,
                trained_on: 0,
                created_at: Utc::now(),
            };
            inner
                .record_registry(RegistryEvent::Registered { version })
                .map_err(anyhow::Error::msg)?;
            inner
                .record_registry(RegistryEvent::Activated {
                    id: "v1".into(),
                    at: Utc::now(),
                })
                .map_err(anyhow::Error::msg)?;
            initial
        } else {
            let v = inner
                .state
                .registry
                .active_version()
                .ok_or_else(|| anyhow::anyhow!("registry has no active version"))?;
            let path = v
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("active version {} has no checkpoint", v.id))?;
            backend.load(Path::new(path))?
        };
        let version = inner.state.registry.active.clone();
        Ok(Self {
            backend,
            config,
            inventory,
            inner: Mutex::new(inner),
            active: RwLock::new(Arc::new(Active { version, model })),
            retraining: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// The serving snapshot; holders keep it alive across a swap.
    pub fn active(&self) -> Arc<Active<B::Model>> {
        self.active.read().unwrap().clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn is_complete(&self, doc: &Doc, payload: &IntentPayload) -> bool {
        !payload.needs_refinement
            && doc
                .spans
                .iter()
                .all(|s| s.confidence.is_none_or(|c| c >= self.config.confidence_threshold))
    }

    pub fn submit_intent(&self, text: &str) -> EngineResult<IntentRecord> {
        if text.trim().is_empty() {
            return Err(EngineError::Validation("text must not be empty".into()));
        }
        let n = text.chars().count();
        if n > self.config.max_text_len {
            return Err(EngineError::Validation(format!(
                "text has {n} characters, the limit is {}",
                self.config.max_text_len
            )));
        }
        let active = self.active();
        let mut record = IntentRecord::new(text);
        record.model_version = Some(active.version.clone());
        match self.backend.predict(&active.model, text) {
            Ok(doc) => {
                record.transition(IntentState::Recognized)?;
                let payload = assemble_intent(&doc);
                let next = if self.is_complete(&doc, &payload) {
                    IntentState::Translated
                } else {
                    IntentState::NeedsRefinement
                };
                record.extraction = Some(Extraction { doc, payload });
                record.transition(next)?;
            }
            Err(e) => {
                record.failure = Some(format!("{e:#}"));
                record.transition(IntentState::Failed)?;
            }
        }
        let mut inner = self.lock();
        record.id = format!("int-{:06}", inner.next_id);
        inner.persist_intent(&record)?;
        inner.next_id += 1;
        inner.state.intents.insert(record.id.clone(), record.clone());
        Ok(record)
    }

    pub fn get(&self, id: &str) -> EngineResult<IntentRecord> {
        self.lock()
            .state
            .intents
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("no intent {id}")))
    }

    pub fn list(&self, state: Option<IntentState>) -> Vec<IntentRecord> {
        self.lock()
            .state
            .intents
            .values()
            .filter(|r| state.is_none_or(|s| r.state == s))
            .cloned()
            .collect()
    }

    fn resolve_spans(doc: &Doc, req: &CorrectionRequest) -> EngineResult<Doc> {
        let mut spans = Vec::with_capacity(req.spans.len());
        for s in &req.spans {
            s.group
                .parse::<EntityGroup>()
                .map_err(|e| EngineError::Validation(e.to_string()))?;
            let sentence = doc.sentences.get(s.sentence).ok_or_else(|| {
                EngineError::Validation(format!("sentence {} does not exist", s.sentence))
            })?;
            let span = Span::over(s.sentence, sentence, s.token_start, s.token_end, s.group.clone())
                .map_err(|e| EngineError::Validation(e.to_string()))?;
            if s.char_start.is_some_and(|c| c != span.char_start) || s.char_end.is_some_and(|c| c != span.char_end) {
                return Err(EngineError::Validation(format!(
                    "character offsets for tokens {}..{} must be {}..{}",
                    s.token_start, s.token_end, span.char_start, span.char_end
                )));
            }
            spans.push(span);
        }
        let mut corrected = doc.clone();
        corrected.set_spans(spans).map_err(|e| match e {
            CoreError::OverlappingSpans(m) => EngineError::Overlap(format!("overlapping spans: {m}")),
            other => EngineError::Validation(other.to_string()),
        })?;
        Ok(corrected)
    }

    /// Replaces the intent's spans with the operator's. A non-empty span set
    /// completes the intent; an empty one keeps it under review.
    pub fn submit_correction(&self, id: &str, req: &CorrectionRequest) -> EngineResult<CorrectionOutcome> {
        let mut inner = self.lock();
        let current = inner
            .state
            .intents
            .get(id)
            .ok_or_else(|| EngineError::NotFound(format!("no intent {id}")))?;
        if !matches!(current.state, IntentState::NeedsRefinement | IntentState::Translated) {
            return Err(EngineError::InvalidState(format!(
                "intent {id} is {:?}; corrections need NEEDS_REFINEMENT or TRANSLATED",
                current.state
            )));
        }
        let doc = &current.extraction.as_ref().expect("recognized intents carry an extraction").doc;
        let corrected = Self::resolve_spans(doc, req)?;
        let key = hash_key(id, &corrected.spans);
        if current.corrections.last().is_some_and(|c| c.key == key) {
            return Ok(CorrectionOutcome {
                record: current.clone(),
                retrain_due: false,
                duplicate: true,
            });
        }
        let complete = !corrected.spans.is_empty();
        if current.state == IntentState::Translated && !complete {
            return Err(EngineError::InvalidState(format!(
                "intent {id} is TRANSLATED; an empty correction would leave it incomplete"
            )));
        }

        let mut record = current.clone();
        let mut payload = assemble_intent(&corrected);
        payload.needs_refinement = !complete;
        if record.state == IntentState::NeedsRefinement {
            record.transition(IntentState::Recognized)?;
            record.transition(if complete {
                IntentState::Translated
            } else {
                IntentState::NeedsRefinement
            })?;
        }
        let now = Utc::now();
        record.updated_at = now;
        record.corrections.push(Correction {
            key: key.clone(),
            spans: corrected.spans.clone(),
            author: req.author.clone(),
            created_at: now,
        });
        let entry = (!inner.keys.contains(&key))
            .then(|| -> EngineResult<CorrectionEntry> {
                Ok(CorrectionEntry {
                    key: key.clone(),
                    intent_id: id.to_string(),
                    author: req.author.clone(),
                    created_at: now,
                    spans: corrected.spans.clone(),
                    sentences: sentence_examples(&corrected, &corrected.spans)?,
                })
            })
            .transpose()?;
        record.extraction = Some(Extraction {
            doc: corrected,
            payload,
        });

        if let Some(e) = &entry {
            if let Some(l) = &mut inner.logs {
                l.corrections.append(e)?;
            }
        }
        inner.persist_intent(&record)?;
        if let Some(e) = entry {
            inner.keys.insert(e.key.clone());
            inner.state.corrections.push(e);
        }
        inner.state.intents.insert(id.to_string(), record.clone());
        let retrain_due = self.config.trigger_k.is_some_and(|k| k > 0 && inner.since_retrain() >= k);
        Ok(CorrectionOutcome {
            record,
            retrain_due,
            duplicate: false,
        })
    }

    /// The refinement dataset: one labeled sentence per corrected sentence.
    pub fn dataset(&self) -> Vec<LabeledSentence> {
        self.lock()
            .state
            .corrections
            .iter()
            .flat_map(|c| c.sentences.iter().cloned())
            .collect()
    }

    /// Trains on the refinement dataset outside the state lock, registers
    /// the result and swaps it in. On failure the old version stays active.
    pub fn retrain(&self) -> EngineResult<ModelVersion> {
        let _guard = self.retraining.try_lock().map_err(|_| EngineError::Busy)?;
        let (dataset, entries) = {
            let inner = self.lock();
            let entries = inner.state.corrections.len();
            let data: Vec<LabeledSentence> = inner
                .state
                .corrections
                .iter()
                .flat_map(|c| c.sentences.iter().cloned())
                .collect();
            (data, entries)
        };
        if dataset.is_empty() {
            return Err(EngineError::Precondition("the refinement dataset is empty".into()));
        }
        let base = self.active();
        let result = self.backend.retrain(&base.model, &dataset);
        let mut inner = self.lock();
        let (model, metrics) = match result {
            Ok(r) => r,
            Err(e) => {
                let reason = format!("{e:#}");
                inner.record_registry(RegistryEvent::Failed {
                    reason: reason.clone(),
                    at: Utc::now(),
                })?;
                return Err(EngineError::RetrainFailed(reason));
            }
        };
        let id = format!("v{}", inner.state.registry.versions.len() + 1);
        let checkpoint = match &inner.logs {
            Some(l) => {
                let path = l.layout.checkpoint(&id);
                if let Err(e) = self.backend.save(&model, &path) {
                    let reason = format!("saving checkpoint: {e:#}");
                    inner.record_registry(RegistryEvent::Failed {
                        reason: reason.clone(),
                        at: Utc::now(),
                    })?;
                    return Err(EngineError::RetrainFailed(reason));
                }
                Some(path.display().to_string())
            }
            None => None,
        };
        let version = ModelVersion {
            id: id.clone(),
            checkpoint,
            metrics: Some(metrics),
            trained_on: entries,
            created_at: Utc::now(),
        };
        inner.record_registry(RegistryEvent::Registered {
            version: version.clone(),
        })?;
        inner.record_registry(RegistryEvent::Activated { id, at: Utc::now() })?;
        *self.active.write().unwrap() = Arc::new(Active {
            version: version.id.clone(),
            model,
        });
        Ok(version)
    }

    /// Simulated render and validation against the static inventory.
    pub fn activate(&self, id: &str) -> EngineResult<IntentRecord> {
        let mut inner = self.lock();
        let current = inner
            .state
            .intents
            .get(id)
            .ok_or_else(|| EngineError::NotFound(format!("no intent {id}")))?;
        if current.state != IntentState::Translated {
            return Err(EngineError::InvalidState(format!(
                "intent {id} is {:?}; activation needs TRANSLATED",
                current.state
            )));
        }
        let mut record = current.clone();
        let payload = &record.extraction.as_ref().expect("translated intents carry an extraction").payload;
        let report = self.inventory.activate(payload);
        if report.success {
            record.transition(IntentState::Activated)?;
        } else {
            record.failure = report.reason.clone();
            record.transition(IntentState::Failed)?;
        }
        record.activation = Some(report);
        inner.persist_intent(&record)?;
        inner.state.intents.insert(id.to_string(), record.clone());
        Ok(record)
    }

    pub fn registry(&self) -> Registry {
        self.lock().state.registry.clone()
    }

    pub fn metrics(&self) -> Metrics {
        let inner = self.lock();
        let s = &inner.state;
        let mut by_state: BTreeMap<IntentState, usize> = IntentState::ALL.iter().map(|&st| (st, 0)).collect();
        for r in s.intents.values() {
            *by_state.entry(r.state).or_default() += 1;
        }
        Metrics {
            intents: s.intents.len(),
            by_state,
            corrections: s.corrections.len(),
            dataset_sentences: s.corrections.iter().map(|c| c.sentences.len()).sum(),
            corrections_since_retrain: inner.since_retrain(),
            active_version: s.registry.active.clone(),
            versions: s.registry.versions.len(),
            failed_retrains: s.registry.failures.len(),
            active_metrics: s.registry.active_version().and_then(|v| v.metrics.clone()),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.lock().state.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Lexicon, LexiconBackend};

    fn lexicon() -> Lexicon {
        Lexicon::from_pairs([
            ("cisco", "VENDOR"),
            ("juniper", "VENDOR"),
            ("routers", "DEVICE"),
            ("switches", "DEVICE"),
            ("up", "STATE"),
            ("paris", "LOCATION"),
        ])
    }

    fn engine(dir: Option<&Path>) -> Engine<LexiconBackend> {
        Engine::open(
            LexiconBackend::default(),
            Some(lexicon()),
            EngineConfig::default(),
            Inventory::default(),
            dir,
        )
        .unwrap()
    }

    fn span(start: usize, end: usize, group: &str) -> SpanInput {
        SpanInput {
            sentence: 0,
            token_start: start,
            token_end: end,
            group: group.into(),
            char_start: None,
            char_end: None,
        }
    }

    fn correction(spans: Vec<SpanInput>) -> CorrectionRequest {
        CorrectionRequest {
            spans,
            author: Some("ops".into()),
        }
    }

    #[test]
    fn transition_graph() {
        use IntentState::*;
        let legal: Vec<(IntentState, IntentState)> = IntentState::ALL
            .iter()
            .flat_map(|&a| IntentState::ALL.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_transition_to(b) && b != Failed)
            .collect();
        assert_eq!(
            legal,
            [
                (Received, Recognized),
                (Recognized, NeedsRefinement),
                (Recognized, Translated),
                (NeedsRefinement, Recognized),
                (Translated, Activated)
            ]
        );
        assert!(Activated.can_transition_to(Failed));
        assert!(!Failed.can_transition_to(Failed));
        assert!(!Translated.can_transition_to(Recognized));
    }

    #[test]
    fn confident_complete_intent_is_translated() {
        let e = engine(None);
        let r = e.submit_intent("Show me Cisco routers up").unwrap();
        assert_eq!(r.state, IntentState::Translated);
        assert!(r.history_is_legal());
        assert_eq!(r.model_version.as_deref(), Some("v1"));
        let p = &r.extraction.as_ref().unwrap().payload;
        assert_eq!(p.targets[0].vendor.as_deref(), Some("cisco"));
    }

    #[test]
    fn gibberish_needs_refinement_then_correction_resolves_it() {
        let e = engine(None);
        let r = e.submit_intent("zzqx qq").unwrap();
        assert_eq!(r.state, IntentState::NeedsRefinement);
        let out = e.submit_correction(&r.id, &correction(vec![span(0, 1, "VENDOR")])).unwrap();
        assert_eq!(out.record.state, IntentState::Translated);
        assert!(out.record.history_is_legal());
        assert_eq!(e.dataset().len(), 1);
        assert_eq!(e.dataset()[0].source, Source::UserCorrection);
    }

    #[test]
    fn low_confidence_goes_to_review() {
        let backend = LexiconBackend {
            confidence: 0.5,
            poison: None,
        };
        let e = Engine::open(backend, Some(lexicon()), EngineConfig::default(), Inventory::default(), None).unwrap();
        let r = e.submit_intent("Show me Cisco routers").unwrap();
        assert_eq!(r.state, IntentState::NeedsRefinement);
    }

    #[test]
    fn validation_errors_persist_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(Some(dir.path()));
        assert!(matches!(e.submit_intent("   "), Err(EngineError::Validation(_))));
        assert!(matches!(e.submit_intent(&"a".repeat(513)), Err(EngineError::Validation(_))));
        assert!(e.list(None).is_empty());
        assert!(Snapshot::load(dir.path()).unwrap().intents.is_empty());
    }

    #[test]
    fn correction_errors() {
        let e = engine(None);
        let r = e.submit_intent("Show me Cisco routers").unwrap();
        assert!(matches!(
            e.submit_correction("int-999999", &correction(vec![])),
            Err(EngineError::NotFound(_))
        ));
        let overlap = correction(vec![span(1, 3, "VENDOR"), span(2, 4, "DEVICE")]);
        assert!(matches!(e.submit_correction(&r.id, &overlap), Err(EngineError::Overlap(_))));
        let bad_group = correction(vec![span(0, 1, "PERSON")]);
        assert!(matches!(e.submit_correction(&r.id, &bad_group), Err(EngineError::Validation(_))));
        let bad_range = correction(vec![span(3, 9, "DEVICE")]);
        assert!(matches!(e.submit_correction(&r.id, &bad_range), Err(EngineError::Validation(_))));
        let mut wrong_chars = span(2, 3, "VENDOR");
        wrong_chars.char_start = Some(0);
        assert!(matches!(
            e.submit_correction(&r.id, &correction(vec![wrong_chars])),
            Err(EngineError::Validation(_))
        ));
        assert!(matches!(e.submit_correction(&r.id, &correction(vec![])), Err(EngineError::InvalidState(_))));
        assert_eq!(e.get(&r.id).unwrap(), r);
    }

    #[test]
    fn sequential_corrections_append_and_replace() {
        let e = engine(None);
        let r = e.submit_intent("Show me Cisco routers").unwrap();
        e.submit_correction(&r.id, &correction(vec![span(2, 3, "VENDOR")])).unwrap();
        let out = e
            .submit_correction(&r.id, &correction(vec![span(2, 3, "VENDOR"), span(3, 4, "DEVICE")]))
            .unwrap();
        assert_eq!(e.dataset().len(), 2);
        assert_eq!(out.record.extraction.unwrap().doc.spans.len(), 2);
        assert_eq!(out.record.corrections.len(), 2);
    }

    #[test]
    fn identical_corrections_are_idempotent() {
        let e = engine(None);
        let r = e.submit_intent("zzqx qq").unwrap();
        let req = correction(vec![span(0, 1, "VENDOR")]);
        let first = e.submit_correction(&r.id, &req).unwrap();
        let second = e.submit_correction(&r.id, &req).unwrap();
        assert!(second.duplicate);
        assert_eq!(first.record, second.record);
        assert_eq!(e.dataset().len(), 1);
    }

    #[test]
    fn empty_correction_keeps_review_state() {
        let e = engine(None);
        let r = e.submit_intent("zzqx qq").unwrap();
        let out = e.submit_correction(&r.id, &correction(vec![])).unwrap();
        assert_eq!(out.record.state, IntentState::NeedsRefinement);
        assert!(out.record.history_is_legal());
        assert_eq!(out.record.history.len(), 5);
    }

    #[test]
    fn retrain_registers_and_swaps() {
        let e = engine(None);
        assert!(matches!(e.retrain(), Err(EngineError::Precondition(_))));
        let r = e.submit_intent("Show acmenet routers").unwrap();
        let before = e.active();
        e.submit_correction(&r.id, &correction(vec![span(1, 2, "VENDOR"), span(2, 3, "DEVICE")]))
            .unwrap();
        let v = e.retrain().unwrap();
        assert_eq!(v.id, "v2");
        assert_eq!(e.registry().versions.len(), 2);
        assert_eq!(e.registry().active, "v2");
        assert_eq!(before.version, "v1");
        assert!(!before.model.entries.contains_key("acmenet"));
        let again = e.submit_intent("Show acmenet routers").unwrap();
        assert_eq!(again.model_version.as_deref(), Some("v2"));
        assert_eq!(again.extraction.unwrap().doc.spans.len(), 2);
        assert_eq!(e.metrics().corrections_since_retrain, 0);
    }

    #[test]
    fn failed_retrain_keeps_old_version() {
        let backend = LexiconBackend {
            confidence: 0.95,
            poison: Some("boom".into()),
        };
        let e = Engine::open(backend, Some(lexicon()), EngineConfig::default(), Inventory::default(), None).unwrap();
        let r = e.submit_intent("boom routers").unwrap();
        e.submit_correction(&r.id, &correction(vec![span(1, 2, "DEVICE")])).unwrap();
        assert!(matches!(e.retrain(), Err(EngineError::RetrainFailed(_))));
        let reg = e.registry();
        assert_eq!((reg.versions.len(), reg.active.as_str(), reg.failures.len()), (1, "v1", 1));
    }

    #[test]
    fn retrain_trigger_after_k_corrections() {
        let cfg = EngineConfig {
            trigger_k: Some(2),
            ..EngineConfig::default()
        };
        let e = Engine::open(LexiconBackend::default(), Some(lexicon()), cfg, Inventory::default(), None).unwrap();
        let a = e.submit_intent("zzqx qq").unwrap();
        let b = e.submit_intent("qq zzqx").unwrap();
        let first = e.submit_correction(&a.id, &correction(vec![span(0, 1, "VENDOR")])).unwrap();
        assert!(!first.retrain_due);
        let second = e.submit_correction(&b.id, &correction(vec![span(0, 1, "VENDOR")])).unwrap();
        assert!(second.retrain_due);
    }

    #[test]
    fn inner_loop_outcomes() {
        let e = engine(None);
        let ok = e.submit_intent("Show Cisco routers").unwrap();
        assert_eq!(e.activate(&ok.id).unwrap().state, IntentState::Activated);
        assert!(matches!(e.activate(&ok.id), Err(EngineError::InvalidState(_))));

        let unknown = e.submit_intent("Show acme routers").unwrap();
        let fixed = e
            .submit_correction(&unknown.id, &correction(vec![span(1, 2, "VENDOR"), span(2, 3, "DEVICE")]))
            .unwrap();
        assert_eq!(fixed.record.state, IntentState::Translated);
        let failed = e.activate(&unknown.id).unwrap();
        assert_eq!(failed.state, IntentState::Failed);
        assert_eq!(failed.failure.as_deref(), Some("unknown vendor: acme"));
        assert!(failed.history_is_legal());

        let review = e.submit_intent("zzqx").unwrap();
        assert!(matches!(e.activate(&review.id), Err(EngineError::InvalidState(_))));
    }

    #[test]
    fn replay_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let e = engine(Some(dir.path()));
        let a = e.submit_intent("Show acmenet routers").unwrap();
        e.submit_correction(&a.id, &correction(vec![span(1, 2, "VENDOR"), span(2, 3, "DEVICE")]))
            .unwrap();
        e.retrain().unwrap();
        let b = e.submit_intent("Show Cisco switches").unwrap();
        e.activate(&b.id).unwrap();
        let live = e.snapshot();
        drop(e);
        assert_eq!(Snapshot::load(dir.path()).unwrap(), live);

        let reopened = engine(Some(dir.path()));
        assert_eq!(reopened.snapshot(), live);
        assert_eq!(reopened.active().version, "v2");
        assert!(reopened.active().model.entries.contains_key("acmenet"));
        let c = reopened.submit_intent("Show Cisco switches").unwrap();
        assert_eq!(c.id, "int-000003");
    }
}
