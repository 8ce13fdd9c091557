//! From-scratch NLU engine for network intents: tensors, a reverse-mode
//! autograd tape, a transformer encoder, a subword tokenizer, and POS and
//! entity taggers with intent assembly on top.

pub mod attention;
pub mod autograd;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/neurons.md")]
    mod neurons {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
