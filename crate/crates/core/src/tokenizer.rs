//! Subword vocabulary, segmentation, sentence splitting and the document
//! model (Doc -> Sentence -> Token, with Spans grouped by name).
//!
//! All character offsets count Unicode scalar values, not bytes, and are
//! relative to the text the structure was built from.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

/// Prefix marking a piece that continues a word.
pub const CONTINUATION: &str = "##";

/// A word-level token with its character extent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn is_split_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace and isolates every punctuation or symbol character
/// as its own token.
pub fn pre_tokenize(text: &str) -> Vec<Token> {
    pre_tokenize_at(text, 0)
}

fn pre_tokenize_at(text: &str, offset: usize) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let flush = |current: &mut String, start: usize, end: usize, tokens: &mut Vec<Token>| {
        if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(current),
                char_start: start + offset,
                char_end: end + offset,
            });
        }
    };
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_whitespace() {
            flush(&mut current, start, i, &mut tokens);
        } else if is_split_char(c) {
            flush(&mut current, start, i, &mut tokens);
            tokens.push(Token {
                text: c.to_string(),
                char_start: i + offset,
                char_end: i + 1 + offset,
            });
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        }
    }
    flush(&mut current, start, n, &mut tokens);
    tokens
}

/// Character ranges of sentences: a sentence ends after `.`, `!` or `?` when
/// followed by whitespace or the end of text. Boundary whitespace is trimmed.
pub fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut ranges = Vec::new();
    let mut start = 0;
    let push = |s: usize, e: usize, ranges: &mut Vec<(usize, usize)>| {
        let mut s = s;
        let mut e = e;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            ranges.push((s, e));
        }
    };
    for i in 0..chars.len() {
        if matches!(chars[i], '.' | '!' | '?') && chars.get(i + 1).is_none_or(|c| c.is_whitespace()) {
            push(start, i + 1, &mut ranges);
            start = i + 1;
        }
    }
    push(start, chars.len(), &mut ranges);
    ranges
}

pub fn split_sentences(text: &str) -> Vec<String> {
    sentence_ranges(text)
        .into_iter()
        .map(|(s, e)| char_slice(text, s, e))
        .collect()
}

/// Substring by character indices.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Subword lexicon with fixed special ids and `##` continuation pieces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
    lowercase: bool,
}

impl Vocabulary {
    /// A vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_pieces(SPECIALS.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    /// Builds from an ordered piece list; line number is the id.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Corpus(format!("vocabulary id {i} must be {s}")));
            }
        }
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::Corpus(format!("invalid piece {p:?} at id {i}")));
            }
            if ids.insert(p.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Self {
            pieces,
            ids,
            lowercase: true,
        })
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.ids.contains_key(piece)
    }

    fn push(&mut self, piece: String) -> bool {
        if self.ids.contains_key(&piece) {
            return false;
        }
        self.ids.insert(piece.clone(), self.pieces.len());
        self.pieces.push(piece);
        true
    }

    fn normalize(&self, word: &str) -> String {
        if self.lowercase {
            word.to_lowercase()
        } else {
            word.to_string()
        }
    }

    /// Greedy longest-match-first segmentation of one word. A word that
    /// cannot be covered becomes a single `[UNK]`.
    pub fn segment_word(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = self.normalize(word).chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        out
    }

    /// Segments pre-split words. Returns piece ids (without `[CLS]`/`[SEP]`)
    /// and, for each piece, the index of the word it came from.
    pub fn segment_words(&self, words: &[Token]) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut owner = Vec::new();
        for (w, tok) in words.iter().enumerate() {
            for id in self.segment_word(&tok.text) {
                ids.push(id);
                owner.push(w);
            }
        }
        (ids, owner)
    }

    /// Full segmentation of a sentence, wrapped as `[CLS] ... [SEP]`.
    pub fn segment(&self, sentence: &str) -> Vec<usize> {
        let (ids, _) = self.segment_words(&pre_tokenize(sentence));
        let mut out = Vec::with_capacity(ids.len() + 2);
        out.push(CLS_ID);
        out.extend(ids);
        out.push(SEP_ID);
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.pieces {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let pieces = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_pieces(pieces)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Learns a vocabulary by repeatedly merging the most frequent adjacent pair
/// of pieces. Ties go to the lexicographically smallest pair; merging stops at
/// `max_size` pieces or when no pair occurs at least twice.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    build_vocab_with(corpus, max_size, true)
}

pub fn build_vocab_with<S: AsRef<str>>(corpus: &[S], max_size: usize, lowercase: bool) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut vocab = Vocabulary::specials_only().with_lowercase(lowercase);
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for tok in pre_tokenize(line.as_ref()) {
            *freq.entry(vocab.normalize(&tok.text)).or_default() += 1;
        }
    }

    // Every character in both its word-initial and continuation form.
    let mut alphabet: Vec<String> = freq
        .keys()
        .flat_map(|w| w.chars())
        .flat_map(|c| [c.to_string(), format!("{CONTINUATION}{c}")])
        .collect();
    alphabet.sort();
    alphabet.dedup();
    if max_size < SPECIALS.len() + alphabet.len() {
        return Err(Error::InvalidArgument(format!(
            "max size {max_size} cannot hold {} specials and {} alphabet pieces",
            SPECIALS.len(),
            alphabet.len()
        )));
    }
    for piece in alphabet {
        vocab.push(piece);
    }

    let mut words: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(w, n)| {
            let pieces = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect();
            (pieces, n)
        })
        .collect();

    while vocab.len() < max_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (pieces, n) in &words {
            for pair in pieces.windows(2) {
                *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()));
        let Some((left, right)) = best else { break };
        let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(&right));
        for (pieces, _) in &mut words {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == left && pieces[i + 1] == right {
                    pieces[i] = merged.clone();
                    pieces.remove(i + 1);
                }
                i += 1;
            }
        }
        vocab.push(merged);
    }
    Ok(vocab)
}

/// Universal part-of-speech tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl PosTag {
    pub const ALL: [PosTag; 17] = [
        PosTag::Adj,
        PosTag::Adp,
        PosTag::Adv,
        PosTag::Aux,
        PosTag::Cconj,
        PosTag::Det,
        PosTag::Intj,
        PosTag::Noun,
        PosTag::Num,
        PosTag::Part,
        PosTag::Pron,
        PosTag::Propn,
        PosTag::Punct,
        PosTag::Sconj,
        PosTag::Sym,
        PosTag::Verb,
        PosTag::X,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Adj => "ADJ",
            PosTag::Adp => "ADP",
            PosTag::Adv => "ADV",
            PosTag::Aux => "AUX",
            PosTag::Cconj => "CCONJ",
            PosTag::Det => "DET",
            PosTag::Intj => "INTJ",
            PosTag::Noun => "NOUN",
            PosTag::Num => "NUM",
            PosTag::Part => "PART",
            PosTag::Pron => "PRON",
            PosTag::Propn => "PROPN",
            PosTag::Punct => "PUNCT",
            PosTag::Sconj => "SCONJ",
            PosTag::Sym => "SYM",
            PosTag::Verb => "VERB",
            PosTag::X => "X",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown POS tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub char_start: usize,
    pub char_end: usize,
    pub tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<PosTag>>,
}

impl Sentence {
    pub fn from_text(text: &str) -> Self {
        let n = text.chars().count();
        Self {
            char_start: 0,
            char_end: n,
            tokens: pre_tokenize(text),
            pos_tags: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A run of consecutive tokens in one sentence, assigned to a named group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub sentence: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Span {
    /// A span over `tokens[start..end]` of `sentence`, taking character
    /// offsets from the tokens.
    pub fn over(sentence_index: usize, sentence: &Sentence, start: usize, end: usize, group: impl Into<String>) -> Result<Self> {
        if start >= end || end > sentence.len() {
            return Err(Error::InvalidArgument(format!(
                "span {start}..{end} invalid for a sentence of {} tokens",
                sentence.len()
            )));
        }
        Ok(Self {
            sentence: sentence_index,
            token_start: start,
            token_end: end,
            char_start: sentence.tokens[start].char_start,
            char_end: sentence.tokens[end - 1].char_end,
            group: group.into(),
            confidence: None,
        })
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.sentence == other.sentence && self.token_start < other.token_end && other.token_start < self.token_end
    }
}

/// Checks spans against a sentence: token ranges in bounds, character
/// offsets consistent with the tokens, no two spans overlapping.
pub fn validate_spans(sentence: &Sentence, spans: &[Span]) -> Result<()> {
    for s in spans {
        if s.token_start >= s.token_end || s.token_end > sentence.len() {
            return Err(Error::InvalidArgument(format!(
                "span {}..{} invalid for a sentence of {} tokens",
                s.token_start,
                s.token_end,
                sentence.len()
            )));
        }
        let (cs, ce) = (sentence.tokens[s.token_start].char_start, sentence.tokens[s.token_end - 1].char_end);
        if (s.char_start, s.char_end) != (cs, ce) {
            return Err(Error::InvalidArgument(format!(
                "span chars {}..{} do not match tokens {}..{} (chars {cs}..{ce})",
                s.char_start, s.char_end, s.token_start, s.token_end
            )));
        }
        if s.group.is_empty() {
            return Err(Error::InvalidArgument("span group must not be empty".into()));
        }
    }
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.sentence, s.token_start));
    for pair in sorted.windows(2) {
        if pair[0].overlaps(pair[1]) {
            return Err(Error::OverlappingSpans(format!(
                "tokens {}..{} and {}..{}",
                pair[0].token_start, pair[0].token_end, pair[1].token_start, pair[1].token_end
            )));
        }
    }
    Ok(())
}

/// Begin / Inside / Outside token label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioTag {
    O,
    B(String),
    I(String),
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::O => f.write_str("O"),
            BioTag::B(g) => write!(f, "B-{g}"),
            BioTag::I(g) => write!(f, "I-{g}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" => Ok(BioTag::O),
            _ => match s.split_once('-') {
                Some(("B", g)) if !g.is_empty() => Ok(BioTag::B(g.to_string())),
                Some(("I", g)) if !g.is_empty() => Ok(BioTag::I(g.to_string())),
                _ => Err(Error::InvalidArgument(format!("bad BIO label {s:?}"))),
            },
        }
    }
}

impl Serialize for BioTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One label per token of `sentence`.
pub fn spans_to_bio(sentence: &Sentence, spans: &[Span]) -> Result<Vec<BioTag>> {
    validate_spans(sentence, spans)?;
    let mut tags = vec![BioTag::O; sentence.len()];
    for s in spans {
        tags[s.token_start] = BioTag::B(s.group.clone());
        for t in &mut tags[s.token_start + 1..s.token_end] {
            *t = BioTag::I(s.group.clone());
        }
    }
    Ok(tags)
}

/// Decodes labels back to spans. An `I-g` that does not continue a span of
/// group `g` opens a new span, as if it were `B-g`.
pub fn bio_to_spans(sentence_index: usize, sentence: &Sentence, tags: &[BioTag]) -> Result<Vec<Span>> {
    if tags.len() != sentence.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} tokens",
            tags.len(),
            sentence.len()
        )));
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let close = |open: &mut Option<(usize, &str)>, end: usize, spans: &mut Vec<Span>| {
        if let Some((start, group)) = open.take() {
            spans.push(Span::over(sentence_index, sentence, start, end, group).unwrap());
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::O => close(&mut open, i, &mut spans),
            BioTag::B(g) => {
                close(&mut open, i, &mut spans);
                open = Some((i, g));
            }
            BioTag::I(g) => match open {
                Some((_, cur)) if cur == g => {}
                _ => {
                    close(&mut open, i, &mut spans);
                    open = Some((i, g));
                }
            },
        }
    }
    close(&mut open, tags.len(), &mut spans);
    Ok(spans)
}

/// Container for analyzed text: sentences of tokens plus labeled spans.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Doc {
    pub text: String,
    pub sentences: Vec<Sentence>,
    pub spans: Vec<Span>,
    /// Group name to indices into `spans`.
    pub span_groups: BTreeMap<String, Vec<usize>>,
}

impl Doc {
    /// Splits `text` into sentences and tokens; offsets are relative to `text`.
    pub fn from_text(text: &str) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let sentences = sentence_ranges(text)
            .into_iter()
            .map(|(s, e)| {
                let sub: String = chars[s..e].iter().collect();
                Sentence {
                    char_start: s,
                    char_end: e,
                    tokens: pre_tokenize_at(&sub, s),
                    pos_tags: None,
                }
            })
            .filter(|s| !s.tokens.is_empty())
            .collect();
        Self {
            text: text.to_string(),
            sentences,
            spans: Vec::new(),
            span_groups: BTreeMap::new(),
        }
    }

    /// Replaces all spans, checking each sentence's spans for validity.
    pub fn set_spans(&mut self, spans: Vec<Span>) -> Result<()> {
        for (i, sentence) in self.sentences.iter().enumerate() {
            let own: Vec<Span> = spans.iter().filter(|s| s.sentence == i).cloned().collect();
            validate_spans(sentence, &own)?;
        }
        if let Some(s) = spans.iter().find(|s| s.sentence >= self.sentences.len()) {
            return Err(Error::InvalidArgument(format!(
                "span refers to sentence {} of {}",
                s.sentence,
                self.sentences.len()
            )));
        }
        let mut spans = spans;
        spans.sort_by_key(|s| (s.sentence, s.token_start));
        self.span_groups.clear();
        for (i, s) in spans.iter().enumerate() {
            self.span_groups.entry(s.group.clone()).or_default().push(i);
        }
        self.spans = spans;
        Ok(())
    }

    pub fn span_text(&self, span: &Span) -> String {
        char_slice(&self.text, span.char_start, span.char_end)
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}
