//! Template-driven synthetic corpus of network intents with gold POS tags and
//! entity spans, plus the JSON-lines corpus format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngState;
use crate::tokenizer::{self, BioTag, PosTag, Sentence, Span, Token, Vocabulary, CLS_ID, SEP_ID};

/// The span groups the recognizer is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityGroup {
    Vendor,
    Device,
    Metric,
    State,
    Duration,
    Count,
    Location,
    VlanId,
}

impl EntityGroup {
    pub const ALL: [EntityGroup; 8] = [
        EntityGroup::Vendor,
        EntityGroup::Device,
        EntityGroup::Metric,
        EntityGroup::State,
        EntityGroup::Duration,
        EntityGroup::Count,
        EntityGroup::Location,
        EntityGroup::VlanId,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityGroup::Vendor => "VENDOR",
            EntityGroup::Device => "DEVICE",
            EntityGroup::Metric => "METRIC",
            EntityGroup::State => "STATE",
            EntityGroup::Duration => "DURATION",
            EntityGroup::Count => "COUNT",
            EntityGroup::Location => "LOCATION",
            EntityGroup::VlanId => "VLAN_ID",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&g| g == self).unwrap()
    }

    /// Payload field filled by spans of this group.
    pub fn intent_field(self) -> &'static str {
        match self {
            EntityGroup::Vendor => "targets.vendor",
            EntityGroup::Device => "targets.device_type",
            EntityGroup::Metric => "filters.metric",
            EntityGroup::State => "filters.state",
            EntityGroup::Duration => "filters.duration",
            EntityGroup::Count => "filters.count",
            EntityGroup::Location => "filters.location",
            EntityGroup::VlanId => "filters.vlan_id",
        }
    }
}

impl fmt::Display for EntityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown span group {s:?}")))
    }
}

/// Number of BIO labels: `O` plus `B-`/`I-` per group.
pub const NUM_BIO_LABELS: usize = 1 + 2 * EntityGroup::ALL.len();

pub fn bio_index(tag: &BioTag) -> Result<usize> {
    Ok(match tag {
        BioTag::O => 0,
        BioTag::B(g) => 1 + 2 * g.parse::<EntityGroup>()?.index(),
        BioTag::I(g) => 2 + 2 * g.parse::<EntityGroup>()?.index(),
    })
}

pub fn bio_label(index: usize) -> BioTag {
    if index == 0 || index >= NUM_BIO_LABELS {
        return BioTag::O;
    }
    let g = EntityGroup::ALL[(index - 1) / 2].as_str().to_string();
    if (index - 1).is_multiple_of(2) {
        BioTag::B(g)
    } else {
        BioTag::I(g)
    }
}

/// Where a training sentence came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Generated,
    UserCorrection,
}

/// A gold span as stored in corpus files.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldSpan {
    pub group: String,
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl From<&Span> for GoldSpan {
    fn from(s: &Span) -> Self {
        Self {
            group: s.group.clone(),
            token_start: s.token_start,
            token_end: s.token_end,
            char_start: s.char_start,
            char_end: s.char_end,
        }
    }
}

/// One labeled sentence, stored at word level. Piece ids and piece-level
/// labels come from [`LabeledSentence::encode`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub tokens: Vec<String>,
    /// Absent for sentences without POS annotation (user corrections).
    #[serde(default)]
    pub pos: Option<Vec<PosTag>>,
    pub spans: Vec<GoldSpan>,
    #[serde(default)]
    pub source: Source,
}

/// Model-ready view of a sentence: `[CLS] pieces [SEP]` with labels on the
/// first piece of each word and `None` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// Index of the piece row carrying each kept word's label.
    pub word_rows: Vec<usize>,
    pub pos_labels: Vec<Option<usize>>,
    pub ner_labels: Vec<Option<usize>>,
}

impl LabeledSentence {
    /// Builds from text and spans, checking that spans are valid for the
    /// tokenization of `text`.
    pub fn from_spans(text: &str, spans: &[GoldSpan], pos: Option<Vec<PosTag>>, source: Source) -> Result<Self> {
        let s = Self {
            text: text.to_string(),
            tokens: tokenizer::pre_tokenize(text).into_iter().map(|t| t.text).collect(),
            pos,
            spans: spans.to_vec(),
            source,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn sentence(&self) -> Sentence {
        Sentence {
            char_start: 0,
            char_end: self.text.chars().count(),
            tokens: tokenizer::pre_tokenize(&self.text),
            pos_tags: self.pos.clone(),
        }
    }

    pub fn doc_spans(&self) -> Vec<Span> {
        self.spans
            .iter()
            .map(|g| Span {
                sentence: 0,
                token_start: g.token_start,
                token_end: g.token_end,
                char_start: g.char_start,
                char_end: g.char_end,
                group: g.group.clone(),
                confidence: None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sentence = self.sentence();
        let words: Vec<&str> = sentence.tokens.iter().map(|t| t.text.as_str()).collect();
        if words != self.tokens {
            return Err(Error::Corpus(format!("tokens do not match text {:?}", self.text)));
        }
        if let Some(pos) = &self.pos {
            if pos.len() != self.tokens.len() {
                return Err(Error::Corpus(format!(
                    "{} POS tags for {} tokens in {:?}",
                    pos.len(),
                    self.tokens.len(),
                    self.text
                )));
            }
        }
        for s in &self.spans {
            s.group.parse::<EntityGroup>()?;
        }
        tokenizer::validate_spans(&sentence, &self.doc_spans())
    }

    pub fn bio(&self) -> Result<Vec<BioTag>> {
        tokenizer::spans_to_bio(&self.sentence(), &self.doc_spans())
    }

    /// Segments into pieces, truncating so the sequence fits `max_len`
    /// including `[CLS]` and `[SEP]`.
    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Result<Encoded> {
        let bio = self.bio()?;
        let sentence = self.sentence();
        let (ids, owner) = vocab.segment_words(&sentence.tokens);
        let budget = max_len.saturating_sub(2);
        let mut enc = Encoded {
            ids: vec![CLS_ID],
            word_rows: Vec::new(),
            pos_labels: vec![None],
            ner_labels: vec![None],
        };
        let mut last_word = None;
        for (&id, &w) in ids.iter().zip(&owner).take(budget) {
            enc.ids.push(id);
            if last_word != Some(w) {
                enc.word_rows.push(enc.ids.len() - 1);
                enc.pos_labels.push(self.pos.as_ref().map(|p| p[w].index()));
                enc.ner_labels.push(Some(bio_index(&bio[w])?));
                last_word = Some(w);
            } else {
                enc.pos_labels.push(None);
                enc.ner_labels.push(None);
            }
        }
        enc.ids.push(SEP_ID);
        enc.pos_labels.push(None);
        enc.ner_labels.push(None);
        Ok(enc)
    }
}

/// A surface string for a slot with its per-word POS tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Filler {
    pub words: Vec<String>,
    pub pos: Vec<PosTag>,
}

impl Filler {
    /// Parses `word/TAG word/TAG ...`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut pos = Vec::new();
        for item in s.split_whitespace() {
            let (w, t) = item
                .rsplit_once('/')
                .ok_or_else(|| Error::Corpus(format!("filler word {item:?} lacks a /TAG")))?;
            words.push(w.to_string());
            pos.push(t.parse()?);
        }
        if words.is_empty() {
            return Err(Error::Corpus("empty filler".into()));
        }
        Ok(Self { words, pos })
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub group: EntityGroup,
    pub fillers: Vec<Filler>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Part {
    Word(String, PosTag),
    Slot(String),
}

/// A sentence pattern: literal `word/TAG` items and `{SLOT}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntentTemplate {
    pub pattern: String,
    parts: Vec<Part>,
    pub slots: BTreeMap<String, Slot>,
}

impl IntentTemplate {
    pub fn new(pattern: &str, slots: &BTreeMap<String, Slot>) -> Result<Self> {
        let mut parts = Vec::new();
        let mut used = BTreeMap::new();
        for item in pattern.split_whitespace() {
            if let Some(name) = item.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                let slot = slots
                    .get(name)
                    .ok_or_else(|| Error::Corpus(format!("slot {{{name}}} has no definition")))?;
                if slot.fillers.is_empty() {
                    return Err(Error::Corpus(format!("slot {{{name}}} has no fillers")));
                }
                used.insert(name.to_string(), slot.clone());
                parts.push(Part::Slot(name.to_string()));
            } else {
                let f = Filler::parse(item)?;
                parts.push(Part::Word(f.words[0].clone(), f.pos[0]));
            }
        }
        Ok(Self {
            pattern: pattern.to_string(),
            parts,
            slots: used,
        })
    }

    /// Pattern with tags stripped, e.g. `Show me {VENDOR} {DEVICE}`.
    pub fn shape(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Word(w, _) => w.clone(),
                Part::Slot(s) => format!("{{{s}}}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Instantiates the template with a chosen filler index per slot name.
    pub fn render(&self, choice: &BTreeMap<String, usize>) -> Result<LabeledSentence> {
        let mut words: Vec<String> = Vec::new();
        let mut pos = Vec::new();
        let mut groups: Vec<(usize, usize, EntityGroup)> = Vec::new();
        for part in &self.parts {
            match part {
                Part::Word(w, t) => {
                    words.push(w.clone());
                    pos.push(*t);
                }
                Part::Slot(name) => {
                    let slot = &self.slots[name];
                    let k = choice.get(name).copied().unwrap_or(0);
                    let f = slot
                        .fillers
                        .get(k)
                        .ok_or_else(|| Error::Corpus(format!("filler {k} out of range for {{{name}}}")))?;
                    let start = words.len();
                    words.extend(f.words.iter().cloned());
                    pos.extend(&f.pos);
                    groups.push((start, words.len(), slot.group));
                }
            }
        }
        let text = words.join(" ");
        let tokens = tokenizer::pre_tokenize(&text);
        let spans = groups
            .into_iter()
            .map(|(s, e, g)| gold_span(&tokens, s, e, g.as_str()))
            .collect::<Vec<_>>();
        let out = LabeledSentence {
            text,
            tokens: words,
            pos: Some(pos),
            spans,
            source: Source::Generated,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn sample(&self, rng: &mut RngState) -> Result<LabeledSentence> {
        let choice = self
            .slots
            .iter()
            .map(|(name, slot)| (name.clone(), rng.below(slot.fillers.len())))
            .collect();
        self.render(&choice)
    }
}

fn gold_span(tokens: &[Token], start: usize, end: usize, group: &str) -> GoldSpan {
    GoldSpan {
        group: group.to_string(),
        token_start: start,
        token_end: end,
        char_start: tokens[start].char_start,
        char_end: tokens[end - 1].char_end,
    }
}

const VENDORS: &[&str] = &[
    "Cisco/PROPN",
    "Juniper/PROPN",
    "Arista/PROPN",
    "Huawei/PROPN",
    "Nokia/PROPN",
    "Fortinet/PROPN",
    "Palo/PROPN Alto/PROPN",
    "Extreme/PROPN Networks/PROPN",
    "Ubiquiti/PROPN",
    "MikroTik/PROPN",
];

const DEVICES: &[&str] = &[
    "routers/NOUN",
    "switches/NOUN",
    "firewalls/NOUN",
    "servers/NOUN",
    "gateways/NOUN",
    "access/NOUN points/NOUN",
    "load/NOUN balancers/NOUN",
    "spine/NOUN switches/NOUN",
    "modems/NOUN",
    "controllers/NOUN",
];

const METRICS: &[&str] = &[
    "cpu/NOUN usage/NOUN",
    "memory/NOUN",
    "bandwidth/NOUN",
    "packet/NOUN loss/NOUN",
    "latency/NOUN",
    "temperature/NOUN",
    "throughput/NOUN",
    "error/NOUN rate/NOUN",
];

const STATES: &[&str] = &[
    "up/ADV",
    "down/ADV",
    "offline/ADJ",
    "online/ADJ",
    "unreachable/ADJ",
    "degraded/ADJ",
    "idle/ADJ",
    "overloaded/ADJ",
];

const DURATIONS: &[&str] = &[
    "a/DET year/NOUN",
    "2/NUM hours/NOUN",
    "an/DET hour/NOUN",
    "10/NUM minutes/NOUN",
    "3/NUM days/NOUN",
    "a/DET week/NOUN",
    "30/NUM seconds/NOUN",
    "yesterday/NOUN",
    "6/NUM months/NOUN",
    "24/NUM hours/NOUN",
];

const COUNTS: &[&str] = &["2/NUM", "3/NUM", "5/NUM", "10/NUM", "two/NUM", "three/NUM", "12/NUM", "four/NUM"];

const LOCATIONS: &[&str] = &[
    "Paris/PROPN",
    "London/PROPN",
    "Berlin/PROPN",
    "Tokyo/PROPN",
    "New/PROPN York/PROPN",
    "Madrid/PROPN",
    "datacenter/NOUN 1/NUM",
    "building/NOUN B/PROPN",
    "Lyon/PROPN",
    "Sydney/PROPN",
];

const VLAN_IDS: &[&str] = &["10/NUM", "20/NUM", "42/NUM", "100/NUM", "200/NUM", "300/NUM", "1001/NUM", "7/NUM"];

const PATTERNS: &[&str] = &[
    "Show/VERB me/PRON {VENDOR} {DEVICE} {STATE} since/ADP {DURATION}",
    "How/SCONJ many/ADJ {DEVICE} are/AUX {STATE} for/ADP more/ADJ than/ADP {DURATION} ?/PUNCT",
    "List/VERB all/DET {VENDOR} {DEVICE} in/ADP {LOCATION}",
    "Configure/VERB vlan/NOUN {VLAN_ID} on/ADP {VENDOR} {DEVICE} in/ADP {LOCATION}",
    "Display/VERB the/DET {METRIC} of/ADP {DEVICE} in/ADP {LOCATION}",
    "Count/VERB {DEVICE} that/PRON are/AUX {STATE}",
    "Show/VERB {METRIC} for/ADP {VENDOR} {DEVICE} over/ADP the/DET last/ADJ {DURATION}",
    "Set/VERB the/DET {METRIC} threshold/NOUN on/ADP {COUNT} {DEVICE} in/ADP {LOCATION}",
    "Enable/VERB vlan/NOUN {VLAN_ID} on/ADP all/DET {DEVICE} in/ADP {LOCATION}",
    "Disable/VERB {COUNT} {VENDOR} {DEVICE} that/PRON are/AUX {STATE}",
    "Which/DET {DEVICE} in/ADP {LOCATION} have/AUX been/AUX {STATE} for/ADP {DURATION} ?/PUNCT",
    "Show/VERB me/PRON the/DET {METRIC} of/ADP {VENDOR} {DEVICE} on/ADP vlan/NOUN {VLAN_ID}",
    "How/SCONJ many/ADJ {VENDOR} {DEVICE} are/AUX in/ADP {LOCATION} ?/PUNCT",
    "List/VERB {STATE} {DEVICE} on/ADP vlan/NOUN {VLAN_ID}",
    "Change/VERB the/DET vlan/NOUN of/ADP {COUNT} {DEVICE} in/ADP {LOCATION} to/ADP {VLAN_ID}",
    "Display/VERB {DEVICE} with/ADP {METRIC} above/ADP {COUNT} percent/NOUN ./PUNCT",
];

fn slot(group: EntityGroup, fillers: &[&str]) -> Slot {
    Slot {
        group,
        fillers: fillers.iter().map(|f| Filler::parse(f).expect("built-in filler")).collect(),
    }
}

/// The built-in slot lexicon, keyed by placeholder name.
pub fn default_slots() -> BTreeMap<String, Slot> {
    use EntityGroup::*;
    [
        ("VENDOR", slot(Vendor, VENDORS)),
        ("DEVICE", slot(Device, DEVICES)),
        ("METRIC", slot(Metric, METRICS)),
        ("STATE", slot(State, STATES)),
        ("DURATION", slot(Duration, DURATIONS)),
        ("COUNT", slot(Count, COUNTS)),
        ("LOCATION", slot(Location, LOCATIONS)),
        ("VLAN_ID", slot(VlanId, VLAN_IDS)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn default_templates() -> Vec<IntentTemplate> {
    let slots = default_slots();
    PATTERNS
        .iter()
        .map(|p| IntentTemplate::new(p, &slots).expect("built-in template"))
        .collect()
}

/// Draws `n` sentences: a uniformly chosen template, then a uniformly chosen
/// filler per slot.
pub fn generate_corpus(templates: &[IntentTemplate], rng: &mut RngState, n: usize) -> Result<Vec<LabeledSentence>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    if templates.is_empty() {
        return Err(Error::Corpus("no templates".into()));
    }
    (0..n).map(|_| rng.choose(templates).sample(rng)).collect()
}

pub fn write_jsonl<W: Write>(mut w: W, corpus: &[LabeledSentence]) -> Result<()> {
    for s in corpus {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: LabeledSentence = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus(format!("line {}: {e}", i + 1)))?;
        s.validate().map_err(|e| Error::Corpus(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[LabeledSentence]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}
