//! Scaled dot-product attention, multi-head attention, sinusoidal position
//! encoding and the post-norm transformer encoder stack.
//!
//! Each operation exists twice: as a plain function over [`Matrix`] values
//! and as an `on_tape` builder used for training. Tests hold the two routes
//! to the same numbers.

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{self, ActivationKind, DenseLayer, LayerNormParams};
use crate::params::{visit_child, visit_child_mut, ParamBinder, Parameters};
use crate::tensor::{self, Matrix, RngState};

/// Additive stand-in for minus infinity on masked scores.
pub const MASK_VALUE: f64 = -1e9;

/// Which key positions each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMask {
    #[default]
    None,
    /// Position t sees only positions <= t.
    Causal,
    /// Only the first `valid_len` positions are real tokens.
    Padding { valid_len: usize },
}

impl AttentionMask {
    /// The additive `T x T` score mask, or `None` when nothing is masked.
    pub fn matrix(&self, t: usize) -> Option<Matrix> {
        match *self {
            AttentionMask::None => None,
            AttentionMask::Causal => Some(Matrix::from_fn(t, t, |q, k| if k > q { MASK_VALUE } else { 0.0 })),
            AttentionMask::Padding { valid_len } if valid_len >= t => None,
            AttentionMask::Padding { valid_len } => {
                Some(Matrix::from_fn(t, t, |_, k| if k >= valid_len { MASK_VALUE } else { 0.0 }))
            }
        }
    }
}

/// Query, key and value projections of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl HeadWeights {
    pub fn new(d_model: usize, d_head: usize, rng: &mut RngState) -> Self {
        let bound = (1.0 / d_model as f64).sqrt();
        Self {
            wq: Matrix::uniform(d_model, d_head, bound, rng),
            wk: Matrix::uniform(d_model, d_head, bound, rng),
            wv: Matrix::uniform(d_model, d_head, bound, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_head(&self) -> usize {
        self.wq.cols()
    }

    fn check(&self) -> Result<()> {
        let shape = self.wq.shape();
        if self.wk.shape() != shape || self.wv.shape() != shape {
            return Err(Error::Geometry(format!(
                "head projections disagree: wq {:?}, wk {:?}, wv {:?}",
                shape,
                self.wk.shape(),
                self.wv.shape()
            )));
        }
        Ok(())
    }

    pub fn on_tape(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str, x: NodeId, mask: Option<&Matrix>) -> NodeId {
        let wq = binder.bind(tape, &format!("{prefix}.wq"), &self.wq);
        let wk = binder.bind(tape, &format!("{prefix}.wk"), &self.wk);
        let wv = binder.bind(tape, &format!("{prefix}.wv"), &self.wv);
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let kt = tape.transpose(k);
        let qk = tape.matmul(q, kt);
        let mut scores = tape.scale(qk, 1.0 / (self.d_head() as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.mask_add(scores, m.clone());
        }
        let weights = tape.softmax_rows(scores);
        tape.matmul(weights, v)
    }
}

impl Parameters for HeadWeights {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
    }
}

/// Row-stochastic attention weights `softmax(Q K^T / sqrt(d_k) + mask)`.
pub fn attention_weights(x: &Matrix, w: &HeadWeights, mask: AttentionMask) -> Result<Matrix> {
    w.check()?;
    if x.cols() != w.d_model() {
        return Err(Error::Shape(format!(
            "attention input has {} columns, head expects {}",
            x.cols(),
            w.d_model()
        )));
    }
    let q = tensor::matmul(x, &w.wq)?;
    let k = tensor::matmul(x, &w.wk)?;
    let mut scores = tensor::matmul(&q, &tensor::transpose(&k))?.scale(1.0 / (w.d_head() as f64).sqrt());
    if let Some(m) = mask.matrix(x.rows()) {
        scores = scores.add(&m)?;
    }
    Ok(tensor::row_softmax(&scores))
}

/// One attention head: `softmax(Q K^T / sqrt(d_k)) V` with Q, K, V projected
/// from `x`. The result has one row per token and `d_head` columns.
pub fn scaled_dot_attention(x: &Matrix, w: &HeadWeights, mask: AttentionMask) -> Result<Matrix> {
    let weights = attention_weights(x, w, mask)?;
    let v = tensor::matmul(x, &w.wv)?;
    tensor::matmul(&weights, &v)
}

/// Several heads whose outputs are concatenated and mixed by `wo`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadWeights>,
    pub wo: Matrix,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, num_heads: usize, rng: &mut RngState) -> Result<Self> {
        let d_head = head_width(d_model, num_heads)?;
        let heads = (0..num_heads).map(|_| HeadWeights::new(d_model, d_head, rng)).collect();
        let bound = (1.0 / d_model as f64).sqrt();
        Ok(Self {
            heads,
            wo: Matrix::uniform(d_model, d_model, bound, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wo.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d_model = self.d_model();
        let d_head = head_width(d_model, self.heads.len())?;
        for (i, h) in self.heads.iter().enumerate() {
            h.check()?;
            if h.d_model() != d_model || h.d_head() != d_head {
                return Err(Error::Geometry(format!(
                    "head {i} is {}x{}, expected {d_model}x{d_head}",
                    h.d_model(),
                    h.d_head()
                )));
            }
        }
        if self.wo.rows() != d_model {
            return Err(Error::Geometry(format!("output projection must be {d_model}x{d_model}")));
        }
        Ok(())
    }

    pub fn on_tape(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str, x: NodeId, mask: Option<&Matrix>) -> NodeId {
        let outs: Vec<NodeId> = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| h.on_tape(tape, binder, &format!("{prefix}.head{i}"), x, mask))
            .collect();
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let wo = binder.bind(tape, &format!("{prefix}.wo"), &self.wo);
        tape.matmul(cat, wo)
    }
}

impl Parameters for MultiHeadAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, h) in self.heads.iter().enumerate() {
            visit_child(h, &format!("head{i}"), f);
        }
        f("wo", &self.wo);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            visit_child_mut(h, &format!("head{i}"), f);
        }
        f("wo", &mut self.wo);
    }
}

/// Per-head width `d_model / num_heads`; the division must be exact.
pub fn head_width(d_model: usize, num_heads: usize) -> Result<usize> {
    if num_heads == 0 {
        return Err(Error::Geometry("at least one attention head is required".into()));
    }
    if !d_model.is_multiple_of(num_heads) {
        return Err(Error::Geometry(format!(
            "model width {d_model} is not divisible by {num_heads} heads"
        )));
    }
    Ok(d_model / num_heads)
}

pub fn multi_head(x: &Matrix, mha: &MultiHeadAttention, mask: AttentionMask) -> Result<Matrix> {
    mha.validate()?;
    let outs = mha
        .heads
        .iter()
        .map(|h| scaled_dot_attention(x, h, mask))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<&Matrix> = outs.iter().collect();
    tensor::matmul(&Matrix::concat_cols(&parts)?, &mha.wo)
}

/// Sinusoidal position codes: `sin(pos / 10000^(2i/d))` in even columns and
/// the matching cosine in odd columns.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Matrix> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Geometry(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    if len == 0 {
        return Err(Error::Geometry("positional encoding of zero positions".into()));
    }
    Ok(Matrix::from_fn(len, d_model, |pos, col| {
        let i = col / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Attention and feed-forward sublayers, each followed by add & norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub mha: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub ffn_in: DenseLayer,
    pub ffn_out: DenseLayer,
    pub norm2: LayerNormParams,
}

impl EncoderBlock {
    pub fn new(d_model: usize, num_heads: usize, d_ff: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::new(d_model, num_heads, rng)?,
            norm1: LayerNormParams::new(d_model),
            ffn_in: DenseLayer::new(d_model, d_ff, Some(ActivationKind::Gelu), rng),
            ffn_out: DenseLayer::new(d_ff, d_model, None, rng),
            norm2: LayerNormParams::new(d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.mha.d_model()
    }

    pub fn validate(&self) -> Result<()> {
        self.mha.validate()?;
        let d = self.d_model();
        if self.ffn_in.fan_in() != d || self.ffn_out.fan_out() != d || self.ffn_in.fan_out() != self.ffn_out.fan_in() {
            return Err(Error::Geometry(format!(
                "feed-forward {}->{}->{} does not map width {d} back to itself",
                self.ffn_in.fan_in(),
                self.ffn_in.fan_out(),
                self.ffn_out.fan_out()
            )));
        }
        if self.norm1.dim() != d || self.norm2.dim() != d {
            return Err(Error::Geometry("layer norm width differs from model width".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, mask: AttentionMask) -> Result<Matrix> {
        let attended = multi_head(x, &self.mha, mask)?;
        let y1 = nn::layer_norm(&x.add(&attended)?, &self.norm1)?;
        let ff = self.ffn_out.forward(&self.ffn_in.forward(&y1)?)?;
        nn::layer_norm(&y1.add(&ff)?, &self.norm2)
    }

    pub fn on_tape(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str, x: NodeId, mask: Option<&Matrix>) -> NodeId {
        let attended = self.mha.on_tape(tape, binder, &format!("{prefix}.mha"), x, mask);
        let res1 = tape.add(x, attended);
        let y1 = self.norm1.on_tape(tape, binder, &format!("{prefix}.norm1"), res1);
        let hidden = self.ffn_in.on_tape(tape, binder, &format!("{prefix}.ffn_in"), y1);
        let ff = self.ffn_out.on_tape(tape, binder, &format!("{prefix}.ffn_out"), hidden);
        let res2 = tape.add(y1, ff);
        self.norm2.on_tape(tape, binder, &format!("{prefix}.norm2"), res2)
    }
}

impl Parameters for EncoderBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        visit_child(&self.mha, "mha", f);
        visit_child(&self.norm1, "norm1", f);
        visit_child(&self.ffn_in, "ffn_in", f);
        visit_child(&self.ffn_out, "ffn_out", f);
        visit_child(&self.norm2, "norm2", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        visit_child_mut(&mut self.mha, "mha", f);
        visit_child_mut(&mut self.norm1, "norm1", f);
        visit_child_mut(&mut self.ffn_in, "ffn_in", f);
        visit_child_mut(&mut self.ffn_out, "ffn_out", f);
        visit_child_mut(&mut self.norm2, "norm2", f);
    }
}

pub fn encoder_block(x: &Matrix, blk: &EncoderBlock, mask: AttentionMask) -> Result<Matrix> {
    blk.forward(x, mask)
}

/// Applies the blocks in order. An empty stack returns `x` unchanged.
pub fn encode_stack(x: &Matrix, blocks: &[EncoderBlock], mask: AttentionMask) -> Result<Matrix> {
    if let Some(b) = blocks.iter().find(|b| b.d_model() != x.cols()) {
        return Err(Error::Geometry(format!(
            "block width {} differs from input width {}",
            b.d_model(),
            x.cols()
        )));
    }
    blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h, mask))
}

/// Tape version of [`encode_stack`]; parameters are bound as `{prefix}.{i}.*`.
pub fn encode_stack_on_tape(
    tape: &mut Tape,
    binder: &mut ParamBinder,
    prefix: &str,
    blocks: &[EncoderBlock],
    x: NodeId,
    mask: Option<&Matrix>,
) -> NodeId {
    blocks
        .iter()
        .enumerate()
        .fold(x, |h, (i, b)| b.on_tape(tape, binder, &format!("{prefix}.{i}"), h, mask))
}
