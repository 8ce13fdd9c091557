//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Graph construction is define-by-run: each builder call appends a node whose
//! parents already exist, so tape order is a topological order. Values are
//! computed by [`Tape::forward`], which can be replayed with fresh inputs or
//! perturbed parameters; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients with the chain rule.
//!
//! ```
//! use ibn_core::autograd::Tape;
//! use ibn_core::nn::ActivationKind;
//! use ibn_core::tensor::Matrix;
//!
//! // o = sigmoid(w * x + b), E = 1/2 (o - y)^2
//! let mut tape = Tape::new();
//! let x = tape.constant(Matrix::scalar(1.0));
//! let w = tape.param("w", Matrix::scalar(0.0));
//! let b = tape.param("b", Matrix::scalar(0.0));
//! let y = tape.constant(Matrix::scalar(1.0));
//! let wx = tape.matmul(x, w);
//! let mu = tape.add(wx, b);
//! let o = tape.activation(mu, ActivationKind::Sigmoid);
//! let loss = tape.mse(o, y);
//! tape.forward_no_inputs().unwrap();
//! assert_eq!(tape.value(o).item(), 0.5);
//! let grads = tape.backward().unwrap();
//! assert!((grads[&b].item() + 0.125).abs() < 1e-15);
//! # let _ = loss;
//! ```

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::{self, ActivationKind};
use crate::tensor::{self, Matrix};

/// Index of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// What a node computes from its parents.
#[derive(Clone, Debug)]
pub enum Op {
    /// Named external input, supplied to [`Tape::forward`].
    Input { name: String, rows: usize, cols: usize },
    /// Stored leaf that is differentiated (a trainable parameter).
    Param { name: String },
    /// Stored leaf that is not differentiated.
    Constant,
    MatMul,
    /// Elementwise sum; the right operand may be a `1 x cols` row broadcast
    /// over every row of the left operand.
    Add,
    Activation(ActivationKind),
    SoftmaxRows,
    /// `(1/2n) * sum((pred - target)^2)` with n the number of rows.
    Mse,
    Scale(f64),
    Transpose,
    ConcatCols,
    /// Adds a fixed matrix (attention mask) to the parent.
    MaskAdd(Matrix),
    LayerNorm { eps: f64 },
    /// Gathers rows of the parent in the given order.
    EmbedLookup(Vec<usize>),
    /// Mean softmax cross-entropy over rows that carry a target.
    CrossEntropy(Vec<Option<usize>>),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Activation(_) => "activation",
            Op::SoftmaxRows => "softmax-rows",
            Op::Mse => "mse",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::ConcatCols => "concat-cols",
            Op::MaskAdd(_) => "mask-add",
            Op::LayerNorm { .. } => "layer-norm",
            Op::EmbedLookup(_) => "embed-lookup",
            Op::CrossEntropy(_) => "cross-entropy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub parents: Vec<NodeId>,
    value: Option<Matrix>,
    trainable: bool,
}

impl Node {
    pub fn value(&self) -> Option<&Matrix> {
        self.value.as_ref()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    evaluated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Option<Matrix>, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(parents.iter().all(|p| p.0 < id.0));
        self.nodes.push(Node {
            id,
            op,
            parents,
            value,
            trainable,
        });
        self.evaluated = false;
        id
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                rows,
                cols,
            },
            vec![],
            None,
            false,
        )
    }

    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> NodeId {
        self.push(Op::Param { name: name.into() }, vec![], Some(value), true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, vec![], Some(value), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b], None, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b], None, false)
    }

    pub fn activation(&mut self, x: NodeId, kind: ActivationKind) -> NodeId {
        self.push(Op::Activation(kind), vec![x], None, false)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows, vec![x], None, false)
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::Mse, vec![pred, target], None, false)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(factor), vec![x], None, false)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose, vec![x], None, false)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols, parts.to_vec(), None, false)
    }

    pub fn mask_add(&mut self, x: NodeId, mask: Matrix) -> NodeId {
        self.push(Op::MaskAdd(mask), vec![x], None, false)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], None, false)
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::EmbedLookup(ids), vec![table], None, false)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        self.push(Op::CrossEntropy(targets), vec![logits], None, false)
    }

    /// Marks any leaf as trainable, e.g. to differentiate w.r.t. an input.
    pub fn set_trainable(&mut self, id: NodeId, trainable: bool) {
        self.nodes[id.0].trainable = trainable;
    }

    /// Ids of trainable leaves, in tape order.
    pub fn trainable(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.trainable).map(|n| n.id).collect()
    }

    /// Names and ids of declared inputs.
    pub fn inputs(&self) -> BTreeMap<String, NodeId> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, .. } => Some((name.clone(), n.id)),
                _ => None,
            })
            .collect()
    }

    /// The stored value of a node. Panics if it has not been computed.
    pub fn value(&self, id: NodeId) -> &Matrix {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("node value read before forward")
    }

    /// Replaces the stored value of a leaf (parameter or constant).
    pub fn set_value(&mut self, id: NodeId, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[id.0];
        match node.op {
            Op::Param { .. } | Op::Constant => {
                node.value = Some(value);
                self.evaluated = false;
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!(
                "node {} is not a stored leaf",
                id.0
            ))),
        }
    }

    pub fn forward_no_inputs(&mut self) -> Result<&Matrix> {
        self.forward(&HashMap::new())
    }

    /// Recomputes every node from the leaves and returns the final value.
    pub fn forward(&mut self, inputs: &HashMap<String, Matrix>) -> Result<&Matrix> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("empty tape".into()));
        }
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, inputs)?;
            if let Some(v) = value {
                self.nodes[i].value = Some(v);
            }
        }
        self.evaluated = true;
        Ok(self.nodes.last().and_then(|n| n.value.as_ref()).unwrap())
    }

    fn eval_node(&self, i: usize, inputs: &HashMap<String, Matrix>) -> Result<Option<Matrix>> {
        let node = &self.nodes[i];
        let shape_err = |detail: String| Error::NodeShape { node: i, detail };
        let arg = |k: usize| self.nodes[node.parents[k].0].value.as_ref().unwrap();
        let out = match &node.op {
            Op::Input { name, rows, cols } => {
                let v = inputs
                    .get(name)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if v.shape() != (*rows, *cols) {
                    return Err(shape_err(format!(
                        "input `{name}` declared {rows}x{cols}, got {}x{}",
                        v.rows(),
                        v.cols()
                    )));
                }
                v.clone()
            }
            Op::Param { .. } | Op::Constant => return Ok(None),
            Op::MatMul => tensor::matmul(arg(0), arg(1)).map_err(|e| shape_err(e.to_string()))?,
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() == b.shape() {
                    a.add(b).unwrap()
                } else {
                    tensor::broadcast_add_row(a, b).map_err(|e| shape_err(e.to_string()))?
                }
            }
            Op::Activation(kind) => nn::activate(*kind, arg(0)),
            Op::SoftmaxRows => tensor::row_softmax(arg(0)),
            Op::Mse => {
                let (p, t) = (arg(0), arg(1));
                Matrix::scalar(nn::mse_cost(p, t).map_err(|e| shape_err(e.to_string()))?)
            }
            Op::Scale(f) => arg(0).scale(*f),
            Op::Transpose => tensor::transpose(arg(0)),
            Op::ConcatCols => {
                let parts: Vec<&Matrix> = (0..node.parents.len()).map(arg).collect();
                Matrix::concat_cols(&parts).map_err(|e| shape_err(e.to_string()))?
            }
            Op::MaskAdd(mask) => arg(0).add(mask).map_err(|e| shape_err(e.to_string()))?,
            Op::LayerNorm { eps } => {
                let (x, g, b) = (arg(0), arg(1), arg(2));
                if g.shape() != (1, x.cols()) || b.shape() != (1, x.cols()) {
                    return Err(shape_err(format!(
                        "layer norm over {} columns with gamma {}x{} and beta {}x{}",
                        x.cols(),
                        g.rows(),
                        g.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                nn::layer_norm_raw(x, g.data(), b.data(), *eps).0
            }
            Op::EmbedLookup(ids) => arg(0).gather_rows(ids).map_err(|e| shape_err(e.to_string()))?,
            Op::CrossEntropy(targets) => {
                let logits = arg(0);
                if targets.len() != logits.rows() {
                    return Err(shape_err(format!(
                        "{} targets for {} rows of logits",
                        targets.len(),
                        logits.rows()
                    )));
                }
                if let Some(t) = targets.iter().flatten().find(|&&t| t >= logits.cols()) {
                    return Err(shape_err(format!(
                        "target class {t} out of range for {} classes",
                        logits.cols()
                    )));
                }
                Matrix::scalar(cross_entropy_value(logits, targets))
            }
        };
        Ok(Some(out))
    }

    /// Gradients of the final (scalar) node with respect to every trainable
    /// leaf, keyed by node id.
    pub fn backward(&self) -> Result<HashMap<NodeId, Matrix>> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let last = self.nodes.len() - 1;
        let loss = self.nodes[last].value.as_ref().unwrap();
        if loss.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(loss.rows(), loss.cols()));
        }

        // Only propagate into subgraphs that reach a trainable leaf.
        let mut needs = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            needs[i] = n.trainable || n.parents.iter().any(|p| needs[p.0]);
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[last] = Some(Matrix::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.parents.is_empty() {
                grads[i] = Some(upstream);
                continue;
            }
            let contributions = self.local_grads(node, &upstream, &needs);
            for (parent, g) in node.parents.iter().zip(contributions) {
                if let Some(g) = g {
                    match &mut grads[parent.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }

        Ok(self
            .nodes
            .iter()
            .filter(|n| n.trainable)
            .map(|n| {
                let g = grads[n.id.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(self.value(n.id).rows(), self.value(n.id).cols()));
                (n.id, g)
            })
            .collect())
    }

    /// Gradient contribution to each parent given the upstream gradient.
    fn local_grads(&self, node: &Node, up: &Matrix, needs: &[bool]) -> Vec<Option<Matrix>> {
        let val = |id: NodeId| self.nodes[id.0].value.as_ref().unwrap();
        let want = |k: usize| needs[node.parents[k].0];
        let out = node.value.as_ref().unwrap();
        match &node.op {
            Op::Input { .. } | Op::Param { .. } | Op::Constant => vec![],
            Op::MatMul => {
                let (a, b) = (val(node.parents[0]), val(node.parents[1]));
                let ga = want(0).then(|| tensor::matmul(up, &tensor::transpose(b)).unwrap());
                let gb = want(1).then(|| tensor::matmul(&tensor::transpose(a), up).unwrap());
                vec![ga, gb]
            }
            Op::Add => {
                let b = val(node.parents[1]);
                let gb = want(1).then(|| {
                    if b.shape() == up.shape() {
                        up.clone()
                    } else {
                        up.sum_rows()
                    }
                });
                vec![want(0).then(|| up.clone()), gb]
            }
            Op::Activation(kind) => {
                let z = val(node.parents[0]);
                let mut g = up.clone();
                for ((gv, &zv), &ov) in g.data_mut().iter_mut().zip(z.data()).zip(out.data()) {
                    *gv *= nn::activation_derivative(*kind, zv, ov);
                }
                vec![Some(g)]
            }
            Op::SoftmaxRows => {
                let mut g = up.clone();
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let dot: f64 = up.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in g.row_mut(r).iter_mut().zip(y) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }
            Op::Mse => {
                let (p, t) = (val(node.parents[0]), val(node.parents[1]));
                let n = p.rows() as f64;
                let diff = p.sub(t).unwrap().scale(up.item() / n);
                let gt = want(1).then(|| diff.scale(-1.0));
                vec![Some(diff), gt]
            }
            Op::Scale(f) => vec![Some(up.scale(*f))],
            Op::Transpose => vec![Some(tensor::transpose(up))],
            Op::ConcatCols => {
                let mut start = 0;
                node.parents
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let w = val(*p).cols();
                        let g = want(k).then(|| up.slice_cols(start, start + w).unwrap());
                        start += w;
                        g
                    })
                    .collect()
            }
            Op::MaskAdd(_) => vec![Some(up.clone())],
            Op::LayerNorm { eps } => {
                let x = val(node.parents[0]);
                let gamma = val(node.parents[1]);
                let (xhat, inv_std) = {
                    let (_, stats) = nn::layer_norm_raw(x, gamma.data(), &vec![0.0; x.cols()], *eps);
                    stats
                };
                let d = x.cols() as f64;
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                let mut ggamma = Matrix::zeros(1, x.cols());
                let mut gbeta = Matrix::zeros(1, x.cols());
                for r in 0..x.rows() {
                    let up_r = up.row(r);
                    let xh = xhat.row(r);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for c in 0..x.cols() {
                        let dxh = up_r[c] * gamma.data()[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                        ggamma.data_mut()[c] += up_r[c] * xh[c];
                        gbeta.data_mut()[c] += up_r[c];
                    }
                    mean_dxh /= d;
                    mean_dxh_xh /= d;
                    let s = inv_std[r];
                    for (c, g) in gx.row_mut(r).iter_mut().enumerate() {
                        let dxh = up_r[c] * gamma.data()[c];
                        *g = s * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                vec![
                    want(0).then_some(gx),
                    want(1).then_some(ggamma),
                    want(2).then_some(gbeta),
                ]
            }
            Op::EmbedLookup(ids) => {
                let table = val(node.parents[0]);
                let mut g = Matrix::zeros(table.rows(), table.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (gv, uv) in g.row_mut(id).iter_mut().zip(up.row(r)) {
                        *gv += uv;
                    }
                }
                vec![Some(g)]
            }
            Op::CrossEntropy(targets) => {
                let logits = val(node.parents[0]);
                let count = targets.iter().flatten().count();
                let mut g = Matrix::zeros(logits.rows(), logits.cols());
                if count > 0 {
                    let scale = up.item() / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = g.row_mut(r);
                        row.copy_from_slice(logits.row(r));
                        tensor::softmax_in_place(row);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
                vec![Some(g)]
            }
        }
    }

    /// Ids of all trainable leaves with their names, for mapping gradients
    /// back onto parameter stores.
    pub fn param_names(&self) -> Vec<(NodeId, String)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { name } if n.trainable => Some((n.id, name.clone())),
                _ => None,
            })
            .collect()
    }
}

fn cross_entropy_value(logits: &Matrix, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Worst relative disagreement between backward gradients and central finite
/// differences, over every entry of every trainable leaf.
///
/// The relative error of a pair `(a, b)` is `|a - b| / max(1e-12, |a| + |b|)`.
pub fn grad_check(tape: &mut Tape, inputs: &HashMap<String, Matrix>, epsilon: f64) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-8, 1e-3]"
        )));
    }
    tape.forward(inputs)?;
    let analytic = tape.backward()?;
    let mut worst: f64 = 0.0;
    for id in tape.trainable() {
        let original = tape.value(id).clone();
        let grad = &analytic[&id];
        for k in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[k] += epsilon;
            let mut minus = original.clone();
            minus.data_mut()[k] -= epsilon;
            let e_plus = eval_with(tape, id, plus, inputs)?;
            let e_minus = eval_with(tape, id, minus, inputs)?;
            let numeric = (e_plus - e_minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
        tape.set_value(id, original)?;
    }
    tape.forward(inputs)?;
    Ok(worst)
}

fn eval_with(tape: &mut Tape, id: NodeId, value: Matrix, inputs: &HashMap<String, Matrix>) -> Result<f64> {
    tape.set_value(id, value)?;
    Ok(tape.forward(inputs)?.item())
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    /// x -> h = sigmoid(w1 x + b1) -> o = sigmoid(w0 h + b0), E = 1/2 (o - y)^2.
    struct TinyNet {
        tape: Tape,
        w1: NodeId,
        b1: NodeId,
        w0: NodeId,
        b0: NodeId,
        h: NodeId,
        o: NodeId,
    }

    fn tiny_net(x: f64, y: f64, w1: f64, b1: f64, w0: f64, b0: f64) -> TinyNet {
        let mut tape = Tape::new();
        let xn = tape.constant(Matrix::scalar(x));
        let w1n = tape.param("w1", Matrix::scalar(w1));
        let b1n = tape.param("b1", Matrix::scalar(b1));
        let w0n = tape.param("w0", Matrix::scalar(w0));
        let b0n = tape.param("b0", Matrix::scalar(b0));
        let yn = tape.constant(Matrix::scalar(y));
        let m1 = tape.matmul(xn, w1n);
        let mu1 = tape.add(m1, b1n);
        let h = tape.activation(mu1, ActivationKind::Sigmoid);
        let m2 = tape.matmul(h, w0n);
        let mu2 = tape.add(m2, b0n);
        let o = tape.activation(mu2, ActivationKind::Sigmoid);
        tape.mse(o, yn);
        TinyNet {
            tape,
            w1: w1n,
            b1: b1n,
            w0: w0n,
            b0: b0n,
            h,
            o,
        }
    }

    #[test]
    fn tiny_net_matches_closed_forms_at_zero() {
        let mut net = tiny_net(1.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        net.tape.forward_no_inputs().unwrap();
        assert_eq!(net.tape.value(net.h).item(), 0.5);
        assert_eq!(net.tape.value(net.o).item(), 0.5);
        let g = net.tape.backward().unwrap();
        assert!((g[&net.w0].item() - -0.0625).abs() < 1e-15);
        assert!((g[&net.b0].item() - -0.125).abs() < 1e-15);
        assert_eq!(g[&net.w1].item(), 0.0);
        assert_eq!(g[&net.b1].item(), 0.0);
    }

    #[test]
    fn tiny_net_matches_closed_forms_at_random_points() {
        let mut rng = RngState::new(11);
        for _ in 0..20 {
            let p: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let (x, y, w1, b1, w0, b0) = (p[0], p[1], p[2], p[3], p[4], p[5]);
            let mut net = tiny_net(x, y, w1, b1, w0, b0);
            net.tape.forward_no_inputs().unwrap();
            let g = net.tape.backward().unwrap();
            // Chain rule by hand with dE/do = (o - y).
            let h = nn::sigmoid(w1 * x + b1);
            let o = nn::sigmoid(w0 * h + b0);
            let delta_out = (o - y) * o * (1.0 - o);
            let delta_hidden = delta_out * w0 * h * (1.0 - h);
            assert!((g[&net.w0].item() - delta_out * h).abs() < 1e-14);
            assert!((g[&net.b0].item() - delta_out).abs() < 1e-14);
            assert!((g[&net.w1].item() - delta_hidden * x).abs() < 1e-14);
            assert!((g[&net.b1].item() - delta_hidden).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_with_named_input() {
        let mut tape = Tape::new();
        let x = tape.input("x", 1, 1);
        let w = tape.param("w", Matrix::scalar(3.0));
        tape.matmul(x, w);
        let mut inputs = HashMap::new();
        inputs.insert("x".to_string(), Matrix::scalar(2.0));
        assert_eq!(tape.forward(&inputs).unwrap().item(), 6.0);
    }

    #[test]
    fn forward_errors() {
        let mut tape = Tape::new();
        let x = tape.input("x", 1, 2);
        let w = tape.param("w", Matrix::zeros(3, 1));
        tape.matmul(x, w);
        assert!(matches!(tape.forward(&HashMap::new()), Err(Error::MissingInput(n)) if n == "x"));
        let mut inputs = HashMap::new();
        inputs.insert("x".to_string(), Matrix::zeros(1, 3));
        assert!(matches!(tape.forward(&inputs), Err(Error::NodeShape { node: 0, .. })));
        inputs.insert("x".to_string(), Matrix::zeros(1, 2));
        assert!(matches!(tape.forward(&inputs), Err(Error::NodeShape { node: 2, .. })));
    }

    #[test]
    fn backward_preconditions() {
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::zeros(2, 2));
        tape.scale(w, 2.0);
        assert!(matches!(tape.backward(), Err(Error::NotEvaluated)));
        tape.forward_no_inputs().unwrap();
        assert!(matches!(tape.backward(), Err(Error::NonScalarLoss(2, 2))));
    }

    #[test]
    fn quadratic_minimum_has_zero_gradient() {
        // E = (w - 3)^2 = 2 * mse(w, 3) with one row.
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::scalar(3.0));
        let t = tape.constant(Matrix::scalar(3.0));
        let e = tape.mse(w, t);
        tape.scale(e, 2.0);
        tape.forward_no_inputs().unwrap();
        assert_eq!(tape.backward().unwrap()[&w].item(), 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let mut net = tiny_net(1.0, 1.0, 0.1, 0.1, 0.1, 0.1);
        assert!(grad_check(&mut net.tape, &HashMap::new(), 1e-2).is_err());
        assert!(grad_check(&mut net.tape, &HashMap::new(), 1e-9).is_err());
    }

    #[test]
    fn grad_check_tiny_net_seed_42() {
        let mut rng = RngState::new(42);
        let p: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut net = tiny_net(0.7, 0.2, p[0], p[1], p[2], p[3]);
        let err = grad_check(&mut net.tape, &HashMap::new(), 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn grad_check_linear_model_is_exact() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(1.5));
        let w = tape.param("w", Matrix::scalar(0.8));
        let y = tape.constant(Matrix::scalar(2.0));
        let yhat = tape.matmul(x, w);
        tape.mse(yhat, y);
        tape.forward_no_inputs().unwrap();
        let g = tape.backward().unwrap()[&w].item();
        assert!((g - (0.8 * 1.5 - 2.0) * 1.5).abs() < 1e-15);
        let err = grad_check(&mut tape, &HashMap::new(), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn sum_of_losses_sums_gradients() {
        let mut rng = RngState::new(5);
        let w0 = Matrix::gaussian(3, 2, &mut rng);
        let x = Matrix::gaussian(4, 3, &mut rng);
        let t1 = Matrix::gaussian(4, 2, &mut rng);
        let t2 = Matrix::gaussian(4, 2, &mut rng);
        let grad_for = |targets: &[&Matrix]| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let w = tape.param("w", w0.clone());
            let y = tape.matmul(xn, w);
            let mut total = None;
            for t in targets {
                let tn = tape.constant((*t).clone());
                let l = tape.mse(y, tn);
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l),
                });
            }
            tape.forward_no_inputs().unwrap();
            tape.backward().unwrap()[&w].clone()
        };
        let both = grad_for(&[&t1, &t2]);
        let sep = grad_for(&[&t1]).add(&grad_for(&[&t2])).unwrap();
        for (a, b) in both.data().iter().zip(sep.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param("w", Matrix::filled(2, 2, 0.3));
        let x = tape.constant(Matrix::filled(1, 2, 1.0));
        let y = tape.matmul(x, w);
        let l = tape.cross_entropy(y, vec![Some(1)]);
        tape.scale(l, 0.0);
        tape.forward_no_inputs().unwrap();
        assert_eq!(tape.backward().unwrap()[&w].max_abs(), 0.0);
    }

    #[test]
    fn every_op_passes_finite_differences() {
        for seed in [1, 2, 3] {
            for kind in crate::oracle::OP_KINDS {
                let mut tape = crate::oracle::op_tape(kind, seed).unwrap();
                let err = grad_check(&mut tape, &HashMap::new(), 1e-6).unwrap();
                assert!(err < 1e-4, "{kind} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn cross_entropy_passes_finite_differences() {
        for seed in [1, 2, 3] {
            let mut rng = RngState::new(seed);
            let mut tape = Tape::new();
            let logits = tape.param("l", Matrix::gaussian(4, 5, &mut rng));
            tape.cross_entropy(logits, vec![Some(0), None, Some(4), Some(2)]);
            let err = grad_check(&mut tape, &HashMap::new(), 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn sigmoid_derivative_is_o_times_one_minus_o() {
        for z in [-3.0, -0.5, 0.0, 0.8, 2.5] {
            let o = nn::sigmoid(z);
            let fd = (nn::sigmoid(z + 1e-6) - nn::sigmoid(z - 1e-6)) / 2e-6;
            assert!((o * (1.0 - o) - fd).abs() < 1e-9);
            assert_eq!(nn::activation_derivative(ActivationKind::Sigmoid, z, o), o * (1.0 - o));
        }
    }
}
