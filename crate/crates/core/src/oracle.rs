//! Finite-difference gradient checks over every op kind and a full encoder
//! stack. Shared by the `gradcheck` command and the test suites.

use std::collections::HashMap;

use serde::Serialize;

use crate::attention::{encode_stack_on_tape, EncoderBlock};
use crate::autograd::{grad_check, Tape};
use crate::error::{Error, Result};
use crate::nn::ActivationKind;
use crate::params::ParamBinder;
use crate::tensor::{Matrix, RngState};

pub const OP_KINDS: [&str; 15] = [
    "matmul",
    "add",
    "add-row",
    "sigmoid",
    "tanh",
    "relu",
    "gelu",
    "softmax",
    "scale",
    "transpose",
    "concat",
    "mask",
    "layer-norm",
    "embed",
    "cross-entropy",
];

pub const OP_TOLERANCE: f64 = 1e-4;
pub const ENCODER_TOLERANCE: f64 = 1e-3;
const EPSILON: f64 = 1e-6;

/// A small scalar-loss tape exercising one op kind on random inputs.
pub fn op_tape(kind: &str, seed: u64) -> Result<Tape> {
    let mut rng = RngState::new(seed);
    let mut tape = Tape::new();
    let a = tape.param("a", Matrix::gaussian(3, 4, &mut rng));
    let out = match kind {
        "matmul" => {
            let b = tape.param("b", Matrix::gaussian(4, 2, &mut rng));
            tape.matmul(a, b)
        }
        "add" => {
            let b = tape.param("b", Matrix::gaussian(3, 4, &mut rng));
            tape.add(a, b)
        }
        "add-row" => {
            let b = tape.param("b", Matrix::gaussian(1, 4, &mut rng));
            tape.add(a, b)
        }
        "sigmoid" => tape.activation(a, ActivationKind::Sigmoid),
        "tanh" => tape.activation(a, ActivationKind::Tanh),
        "relu" => tape.activation(a, ActivationKind::Relu),
        "gelu" => tape.activation(a, ActivationKind::Gelu),
        "softmax" => tape.softmax_rows(a),
        "scale" => tape.scale(a, -1.7),
        "transpose" => tape.transpose(a),
        "concat" => {
            let b = tape.param("b", Matrix::gaussian(3, 2, &mut rng));
            tape.concat_cols(&[a, b])
        }
        "mask" => {
            let mut mask = Matrix::zeros(3, 4);
            mask.set(0, 1, -1e9);
            let masked = tape.mask_add(a, mask);
            tape.softmax_rows(masked)
        }
        "layer-norm" => {
            let g = tape.param("g", Matrix::uniform(1, 4, 1.0, &mut rng));
            let b = tape.param("beta", Matrix::gaussian(1, 4, &mut rng));
            tape.layer_norm(a, g, b, 1e-5)
        }
        "embed" => tape.embed_lookup(a, vec![2, 0, 2, 1]),
        "cross-entropy" => {
            tape.cross_entropy(a, vec![Some(0), None, Some(3)]);
            return Ok(tape);
        }
        other => return Err(Error::InvalidArgument(format!("unknown op kind {other}"))),
    };
    // Random linear read-out so every output entry affects the loss.
    tape.forward_no_inputs()?;
    let (rows, cols) = tape.value(out).shape();
    let probe = tape.constant(Matrix::gaussian(cols, 3, &mut rng));
    let proj = tape.matmul(out, probe);
    let target = tape.constant(Matrix::gaussian(rows, 3, &mut rng));
    tape.mse(proj, target);
    Ok(tape)
}

/// Loss tape over a stack of `layers` encoder blocks of width `d_model`,
/// with the input itself trainable.
pub fn encoder_tape(d_model: usize, heads: usize, layers: usize, seq_len: usize, seed: u64) -> Result<Tape> {
    let mut rng = RngState::new(seed);
    let blocks = (0..layers)
        .map(|_| EncoderBlock::new(d_model, heads, 2 * d_model, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let x = tape.param("x", Matrix::gaussian(seq_len, d_model, &mut rng));
    let out = encode_stack_on_tape(&mut tape, &mut binder, "blocks", &blocks, x, None);
    let probe = tape.constant(Matrix::gaussian(d_model, 2, &mut rng));
    let proj = tape.matmul(out, probe);
    let target = tape.constant(Matrix::gaussian(seq_len, 2, &mut rng));
    tape.mse(proj, target);
    Ok(tape)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Every op kind, then a two-block encoder at width 8, for each seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for kind in OP_KINDS {
            let mut tape = op_tape(kind, seed)?;
            out.push(CheckResult {
                name: kind.to_string(),
                seed,
                max_rel_error: grad_check(&mut tape, &HashMap::new(), EPSILON)?,
                tolerance: OP_TOLERANCE,
            });
        }
        let mut tape = encoder_tape(8, 2, 2, 4, seed)?;
        out.push(CheckResult {
            name: "encoder-2x8".into(),
            seed,
            max_rel_error: grad_check(&mut tape, &HashMap::new(), EPSILON)?,
            tolerance: ENCODER_TOLERANCE,
        });
    }
    Ok(out)
}
