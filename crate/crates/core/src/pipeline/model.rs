//! Encoder with token-level heads, and its binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMask, EncoderBlock};
use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, DenseLayer};
use crate::params::{visit_child, visit_child_mut, ParamBinder, Parameters};
use crate::pipeline::corpus::NUM_BIO_LABELS;
use crate::tensor::{Matrix, RngState};
use crate::tokenizer::{PosTag, Vocabulary};

/// Encoder shape: width, heads, depth, feed-forward width, max sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl Geometry {
    pub const fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 256,
            max_len: 32,
        }
    }

    /// BERT-base shape. Validates, but is far too large to train here.
    pub const fn base() -> Self {
        Self {
            d_model: 768,
            heads: 12,
            layers: 12,
            d_ff: 3072,
            max_len: 512,
        }
    }

    pub fn head_width(&self) -> Result<usize> {
        attention::head_width(self.d_model, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.head_width()?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Geometry(format!("model width {} must be even", self.d_model)));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return Err(Error::Geometry("layers and feed-forward width must be positive".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Geometry(format!("max length {} leaves no room for tokens", self.max_len)));
        }
        Ok(())
    }
}

/// Embedding, encoder stack, pooler and the three token/sentence heads.
#[derive(Clone, Debug, PartialEq)]
pub struct NerModel {
    pub geometry: Geometry,
    pub vocab: Vocabulary,
    pub embedding: Matrix,
    pub blocks: Vec<EncoderBlock>,
    pub pooler: DenseLayer,
    pub mlm_head: DenseLayer,
    pub pos_head: DenseLayer,
    pub ner_head: DenseLayer,
    positional: Matrix,
}

/// Parameter-name prefixes of the shared encoder.
pub const ENCODER_PREFIXES: [&str; 2] = ["embedding", "blocks"];

impl NerModel {
    pub fn new(vocab: Vocabulary, geometry: Geometry, rng: &mut RngState) -> Result<Self> {
        geometry.validate()?;
        let d = geometry.d_model;
        let embedding = Matrix::uniform(vocab.len(), d, 1.0, rng);
        let blocks = (0..geometry.layers)
            .map(|_| EncoderBlock::new(d, geometry.heads, geometry.d_ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            pooler: DenseLayer::new(d, d, Some(ActivationKind::Tanh), rng),
            mlm_head: DenseLayer::new(d, vocab.len(), None, rng),
            pos_head: DenseLayer::new(d, PosTag::ALL.len(), None, rng),
            ner_head: DenseLayer::new(d, NUM_BIO_LABELS, None, rng),
            positional: attention::positional_encoding(geometry.max_len, d)?,
            geometry,
            vocab,
            embedding,
            blocks,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let d = self.geometry.d_model;
        let expect = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Geometry(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        expect("embedding", self.embedding.shape(), (self.vocab.len(), d))?;
        if self.blocks.len() != self.geometry.layers {
            return Err(Error::Geometry(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                self.geometry.layers
            )));
        }
        for b in &self.blocks {
            b.validate()?;
            if b.d_model() != d {
                return Err(Error::Geometry(format!("block width {} differs from {d}", b.d_model())));
            }
        }
        expect("pooler", self.pooler.weight.shape(), (d, d))?;
        expect("mlm head", self.mlm_head.weight.shape(), (d, self.vocab.len()))?;
        expect("pos head", self.pos_head.weight.shape(), (d, PosTag::ALL.len()))?;
        expect("ner head", self.ner_head.weight.shape(), (d, NUM_BIO_LABELS))?;
        Ok(())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.geometry.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} pieces outside 1..={}",
                ids.len(),
                self.geometry.max_len
            )));
        }
        if let Some(id) = ids.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::InvalidArgument(format!("piece id {id} outside vocabulary")));
        }
        Ok(())
    }

    fn positions(&self, t: usize) -> Matrix {
        self.positional.gather_rows(&(0..t).collect::<Vec<_>>()).unwrap()
    }

    /// Contextual representations, one row per piece.
    pub fn encode(&self, ids: &[usize]) -> Result<Matrix> {
        self.check_ids(ids)?;
        let x = self.embedding.gather_rows(ids)?.add(&self.positions(ids.len()))?;
        attention::encode_stack(&x, &self.blocks, AttentionMask::None)
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, binder: &mut ParamBinder, ids: &[usize]) -> Result<NodeId> {
        self.check_ids(ids)?;
        let table = binder.bind(tape, "embedding", &self.embedding);
        let tok = tape.embed_lookup(table, ids.to_vec());
        let pos = tape.constant(self.positions(ids.len()));
        let x = tape.add(tok, pos);
        Ok(attention::encode_stack_on_tape(tape, binder, "blocks", &self.blocks, x, None))
    }

    /// Pooled sentence vector from the `[CLS]` row.
    pub fn pool(&self, encoded: &Matrix) -> Result<Matrix> {
        self.pooler.forward(&encoded.gather_rows(&[0])?)
    }

    pub fn num_encoder_params(&self) -> usize {
        self.embedding.len() + self.blocks.iter().map(Parameters::num_params).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let g = &self.geometry;
        for v in [g.d_model, g.heads, g.layers, g.d_ff, g.max_len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(self.vocab.lowercase() as u8);
        out.extend_from_slice(&(self.vocab.len() as u64).to_le_bytes());
        for p in self.vocab.pieces() {
            put_str(&mut out, p);
        }
        let mut sections = Vec::new();
        self.visit_params(&mut |name, m| sections.push((name.to_string(), m.clone())));
        out.extend_from_slice(&(sections.len() as u64).to_le_bytes());
        for (name, m) in sections {
            put_str(&mut out, &name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = get_usize(&mut r)?;
        }
        let geometry = Geometry {
            d_model: dims[0],
            heads: dims[1],
            layers: dims[2],
            d_ff: dims[3],
            max_len: dims[4],
        };
        geometry.validate()?;
        let [lowercase] = take::<1>(&mut r)?;
        let n = get_usize(&mut r)?;
        let pieces = (0..n).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_pieces(pieces)?.with_lowercase(lowercase != 0);

        let mut model = Self::new(vocab, geometry, &mut RngState::new(0))?;
        let count = get_usize(&mut r)?;
        let mut sections = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let rows = get_usize(&mut r)?;
            let cols = get_usize(&mut r)?;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("section {name} truncated")))?;
            let data = (0..len).map(|_| take(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            if sections.insert(name.clone(), Matrix::new(rows, cols, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate section {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let mut problem = None;
        model.visit_params_mut(&mut |name, m| match sections.remove(name) {
            Some(s) if s.shape() == m.shape() => *m = s,
            Some(s) => {
                problem.get_or_insert(format!("section {name} is {:?}, expected {:?}", s.shape(), m.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing section {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if let Some(name) = sections.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected section {name}")));
        }
        Ok(model)
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Parameters for NerModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("embedding", &self.embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(b, &format!("blocks.{i}"), f);
        }
        visit_child(&self.pooler, "pooler", f);
        visit_child(&self.mlm_head, "mlm_head", f);
        visit_child(&self.pos_head, "pos_head", f);
        visit_child(&self.ner_head, "ner_head", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("embedding", &mut self.embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(b, &format!("blocks.{i}"), f);
        }
        visit_child_mut(&mut self.pooler, "pooler", f);
        visit_child_mut(&mut self.mlm_head, "mlm_head", f);
        visit_child_mut(&mut self.pos_head, "pos_head", f);
        visit_child_mut(&mut self.ner_head, "ner_head", f);
    }
}

const MAGIC: &[u8; 8] = b"IBNMODEL";
const FORMAT_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn get_usize(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(take(r)?)).map_err(|_| Error::Checkpoint("size overflow".into()))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = u32::from_le_bytes(take(r)?) as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
}
