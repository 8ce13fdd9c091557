//! Activations, the perceptron, dense and normalization layers, the
//! linear-regression cost and its gradients, and gradient-descent optimizers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamBinder, Parameters};
use crate::tensor::{self, Matrix, RngState};

/// Elementwise nonlinearity applied to a neuron's linear output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActivationKind {
    /// 1 when the input reaches the threshold, else 0.
    Step { threshold: f64 },
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// Abramowitz & Stegun 7.1.26, |error| < 1.5e-7.
const ERF_P: f64 = 0.327_591_1;
const ERF_A: [f64; 5] = [
    0.254_829_592,
    -0.284_496_736,
    1.421_413_741,
    -1.453_152_027,
    1.061_405_429,
];

/// Error function via a rational approximation, odd-extended to negatives.
pub fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let ax = x.abs();
    let t = 1.0 / (1.0 + ERF_P * ax);
    let poly = t * (ERF_A[0] + t * (ERF_A[1] + t * (ERF_A[2] + t * (ERF_A[3] + t * ERF_A[4]))));
    sign * (1.0 - poly * (-ax * ax).exp())
}

/// Exact derivative of [`erf`] as implemented, so gradients agree with finite
/// differences of the approximation rather than of the true function.
fn erf_derivative(x: f64) -> f64 {
    let ax = x.abs();
    let t = 1.0 / (1.0 + ERF_P * ax);
    let poly = t * (ERF_A[0] + t * (ERF_A[1] + t * (ERF_A[2] + t * (ERF_A[3] + t * ERF_A[4]))));
    let dpoly_dt =
        ERF_A[0] + t * (2.0 * ERF_A[1] + t * (3.0 * ERF_A[2] + t * (4.0 * ERF_A[3] + t * 5.0 * ERF_A[4])));
    let dt_dax = -ERF_P * t * t;
    let e = (-ax * ax).exp();
    // d/dax [1 - poly * e]; erf is odd so its derivative is even in x.
    -(dpoly_dt * dt_dax * e) + poly * 2.0 * ax * e
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn apply_activation(kind: ActivationKind, z: f64) -> f64 {
    match kind {
        ActivationKind::Step { threshold } => {
            if z >= threshold {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Sigmoid => sigmoid(z),
        ActivationKind::Tanh => z.tanh(),
        ActivationKind::Relu => z.max(0.0),
        ActivationKind::Gelu => gelu(z),
    }
}

/// Derivative at `z`, given the already computed output `out = f(z)`.
pub fn activation_derivative(kind: ActivationKind, z: f64, out: f64) -> f64 {
    match kind {
        ActivationKind::Step { .. } => 0.0,
        ActivationKind::Sigmoid => out * (1.0 - out),
        ActivationKind::Tanh => 1.0 - out * out,
        // Subgradient 0 at the kink.
        ActivationKind::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Gelu => {
            normal_cdf(z) + z * 0.5 * erf_derivative(z / std::f64::consts::SQRT_2) / std::f64::consts::SQRT_2
        }
    }
}

pub fn activate(kind: ActivationKind, z: &Matrix) -> Matrix {
    z.map(|v| apply_activation(kind, v))
}

/// Thresholded neuron: fires (1) iff `sum(w_i x_i) + bias >= threshold`.
pub fn perceptron_fire(inputs: &[f64], weights: &[f64], bias: f64, threshold: f64) -> Result<u8> {
    if inputs.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} weights",
            inputs.len(),
            weights.len()
        )));
    }
    let z: f64 = inputs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() + bias;
    Ok(apply_activation(ActivationKind::Step { threshold }, z) as u8)
}

/// `(1/2n) * sum((pred - target)^2)` where n is the number of rows.
pub fn mse_cost(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sq / (2.0 * pred.rows() as f64))
}

/// Cost of the line `theta0 + theta1 * x` over the data.
pub fn linreg_cost(theta0: f64, theta1: f64, xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_linreg_data(xs, ys)?;
    let n = xs.len() as f64;
    Ok(xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (theta0 + theta1 * x - y).powi(2))
        .sum::<f64>()
        / (2.0 * n))
}

/// Closed-form gradients of [`linreg_cost`] with respect to `(theta0, theta1)`.
pub fn linreg_gradients(theta0: f64, theta1: f64, xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_linreg_data(xs, ys)?;
    let n = xs.len() as f64;
    let (mut g0, mut g1) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let r = theta0 + theta1 * x - y;
        g0 += r;
        g1 += r * x;
    }
    Ok((g0 / n, g1 / n))
}

/// Full-batch descent on [`linreg_cost`] from `(0, 0)`, one update per
/// epoch. Returns `(theta0, theta1)` after each epoch.
pub fn fit_line(opt: &mut OptimizerState, xs: &[f64], ys: &[f64], epochs: usize) -> Result<Vec<(f64, f64)>> {
    let mut theta = Matrix::zeros(1, 2);
    let mut path = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (g0, g1) = linreg_gradients(theta.get(0, 0), theta.get(0, 1), xs, ys)?;
        opt.update("theta", &mut theta, &Matrix::row_vector(&[g0, g1])?)?;
        let cost = linreg_cost(theta.get(0, 0), theta.get(0, 1), xs, ys)?;
        opt.end_epoch(cost);
        path.push((theta.get(0, 0), theta.get(0, 1)));
    }
    Ok(path)
}

fn check_linreg_data(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty data".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} xs but {} ys",
            xs.len(),
            ys.len()
        )));
    }
    Ok(())
}

/// Number of weights and biases in a fully connected network with the given
/// layer widths.
pub fn count_params(layer_sizes: &[usize]) -> Result<usize> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least an input and an output layer".into(),
        ));
    }
    Ok(layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum())
}

/// Plain gradient descent or heavy-ball momentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Plain,
    Momentum { beta: f64 },
}

/// Reduce-on-plateau learning rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub best_cost: f64,
    pub stall_count: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best_cost: f64::INFINITY,
            stall_count: 0,
        }
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(0.5, 2)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub plateau: Option<Plateau>,
    velocity: HashMap<String, Matrix>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, eta: f64, plateau: Option<Plateau>) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {eta} must be > 0")));
        }
        if let OptimizerKind::Momentum { beta } = kind {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!("momentum {beta} outside [0, 1)")));
            }
        }
        if let Some(p) = &plateau {
            if !(p.factor > 0.0 && p.factor < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "plateau factor {} outside (0, 1)",
                    p.factor
                )));
            }
        }
        Ok(Self {
            kind,
            eta,
            plateau,
            velocity: HashMap::new(),
        })
    }

    pub fn plain(eta: f64) -> Result<Self> {
        Self::new(OptimizerKind::Plain, eta, None)
    }

    pub fn momentum(eta: f64, beta: f64) -> Result<Self> {
        Self::new(OptimizerKind::Momentum { beta }, eta, None)
    }

    /// Updates one named parameter in place.
    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` is {}x{}, parameter is {}x{}",
                grad.rows(),
                grad.cols(),
                param.rows(),
                param.cols()
            )));
        }
        match self.kind {
            OptimizerKind::Plain => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= self.eta * g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                for ((p, vv), g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *vv = beta * *vv + g;
                    *p -= self.eta * *vv;
                }
            }
        }
        Ok(())
    }

    /// Applies gradients to every parameter of `model` that has one.
    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &HashMap<String, Matrix>) -> Result<()> {
        let mut result = Ok(());
        model.visit_params_mut(&mut |name, param| {
            if result.is_err() {
                return;
            }
            if let Some(g) = grads.get(name) {
                result = self.update(name, param, g);
            }
        });
        result
    }

    /// Feeds the epoch's cost to the plateau schedule. Returns true when the
    /// learning rate was reduced.
    pub fn end_epoch(&mut self, cost: f64) -> bool {
        let Some(p) = &mut self.plateau else {
            return false;
        };
        if cost < p.best_cost {
            p.best_cost = cost;
            p.stall_count = 0;
            return false;
        }
        p.stall_count += 1;
        if p.stall_count >= p.patience {
            self.eta *= p.factor;
            p.stall_count = 0;
            return true;
        }
        false
    }
}

/// Per-feature normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }

    pub fn on_tape(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str, x: NodeId) -> NodeId {
        let g = binder.bind(tape, &format!("{prefix}.gamma"), &self.gamma);
        let b = binder.bind(tape, &format!("{prefix}.beta"), &self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl Parameters for LayerNormParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

/// Row-wise layer normalization.
pub fn layer_norm(x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    if x.cols() != p.dim() || p.beta.cols() != p.dim() {
        return Err(Error::Shape(format!(
            "layer norm over {} columns with parameters of width {}",
            x.cols(),
            p.dim()
        )));
    }
    if !(p.eps > 0.0) {
        return Err(Error::InvalidArgument("layer norm eps must be > 0".into()));
    }
    Ok(layer_norm_raw(x, p.gamma.data(), p.beta.data(), p.eps).0)
}

/// Returns the normalized output together with `(x_hat, 1/sqrt(var + eps))`
/// per row, which the backward pass reuses.
pub(crate) fn layer_norm_raw(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> (Matrix, (Matrix, Vec<f64>)) {
    let d = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + eps).sqrt();
        inv_std.push(s);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * s;
        }
        let o = out.row_mut(r);
        for c in 0..o.len() {
            o[c] = gamma[c] * xhat.get(r, c) + beta[c];
        }
    }
    (out, (xhat, inv_std))
}

/// Fully connected layer `activation(x W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Option<ActivationKind>,
}

impl DenseLayer {
    /// Weights uniform in `±sqrt(1/fan_in)`, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, activation: Option<ActivationKind>, rng: &mut RngState) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Matrix::uniform(fan_in, fan_out, bound, rng),
            bias: Matrix::zeros(1, fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let z = tensor::broadcast_add_row(&tensor::matmul(x, &self.weight)?, &self.bias)?;
        Ok(match self.activation {
            Some(kind) => activate(kind, &z),
            None => z,
        })
    }

    pub fn on_tape(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str, x: NodeId) -> NodeId {
        let w = binder.bind(tape, &format!("{prefix}.weight"), &self.weight);
        let b = binder.bind(tape, &format!("{prefix}.bias"), &self.bias);
        let xw = tape.matmul(x, w);
        let z = tape.add(xw, b);
        match self.activation {
            Some(kind) => tape.activation(z, kind),
            None => z,
        }
    }
}

impl Parameters for DenseLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn activation_fixed_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(apply_activation(ActivationKind::Tanh, 0.0), 0.0);
        assert_eq!(apply_activation(ActivationKind::Relu, -1.5), 0.0);
        assert_eq!(apply_activation(ActivationKind::Relu, 2.0), 2.0);
        assert_eq!(gelu(0.0), 0.0);
        let d = 1.0 - sigmoid(20.0);
        assert!(d > 0.0 && d < 1e-8);
    }

    #[test]
    fn gelu_matches_independent_normal_cdf() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        assert!((gelu(1.0) - 0.841345).abs() < 1e-5);
        for i in -40..=40 {
            let x = i as f64 / 10.0;
            assert!((gelu(x) - x * normal.cdf(x)).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn gelu_shape_properties() {
        for x in [10.0, -10.0] {
            assert!((gelu(x) - x.max(0.0)).abs() < 1e-6);
        }
        for i in 1..300 {
            let x = -3.0 + i as f64 * 0.01;
            assert!(gelu(x) < 0.0, "gelu({x}) = {}", gelu(x));
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for i in -30..=30 {
            let x = i as f64 / 7.0;
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            let an = activation_derivative(ActivationKind::Gelu, x, gelu(x));
            assert!((fd - an).abs() < 1e-7, "x = {x}: {fd} vs {an}");
        }
    }

    #[test]
    fn bounded_ranges_on_random_inputs() {
        let mut rng = RngState::new(9);
        for _ in 0..10_000 {
            let z = rng.uniform(-30.0, 30.0);
            let t = z.tanh();
            let s = sigmoid(z);
            assert!((-1.0..=1.0).contains(&t));
            assert!((0.0..=1.0).contains(&s));
            let z = rng.uniform(-15.0, 15.0);
            assert!(z.tanh().abs() < 1.0);
            assert!(sigmoid(z) > 0.0 && sigmoid(z) < 1.0);
        }
    }

    #[test]
    fn perceptron_thresholding() {
        // x1 + x2 with unit weights against a threshold of 40.
        assert_eq!(perceptron_fire(&[10.0, 20.0], &[1.0, 1.0], 0.0, 40.0).unwrap(), 0);
        assert_eq!(perceptron_fire(&[20.0, 30.0], &[1.0, 1.0], 0.0, 40.0).unwrap(), 1);
        assert_eq!(perceptron_fire(&[15.0, 25.0], &[1.0, 1.0], 0.0, 40.0).unwrap(), 1);
        assert!(perceptron_fire(&[1.0], &[1.0, 2.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        assert_eq!(mse_cost(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_cost(&Matrix::scalar(2.0), &Matrix::scalar(0.0)).unwrap(), 2.0);
        assert_eq!(mse_cost(&a, &Matrix::zeros(2, 1)).unwrap(), 2.5);
        assert!(mse_cost(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn linreg_gradient_examples() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [2.0, 4.0, 6.0];
        assert_eq!(linreg_gradients(0.0, 2.0, &xs, &ys).unwrap(), (0.0, 0.0));
        assert_eq!(linreg_gradients(0.0, 0.0, &[1.0], &[1.0]).unwrap(), (-1.0, -1.0));
        assert!(linreg_gradients(0.0, 0.0, &[], &[]).is_err());
    }

    #[test]
    fn linreg_gradients_match_autograd() {
        let mut rng = RngState::new(21);
        let xs: Vec<f64> = (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 - 1.5 * x + rng.uniform(-0.1, 0.1)).collect();
        let (t0, t1) = (0.3, 0.9);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::new(xs.len(), 1, xs.clone()).unwrap());
        let w = tape.param("theta1", Matrix::scalar(t1));
        let b = tape.param("theta0", Matrix::scalar(t0));
        let y = tape.constant(Matrix::new(ys.len(), 1, ys.clone()).unwrap());
        let xw = tape.matmul(x, w);
        let pred = tape.add(xw, b);
        tape.mse(pred, y);
        let cost = tape.forward_no_inputs().unwrap().item();
        assert!((cost - linreg_cost(t0, t1, &xs, &ys).unwrap()).abs() < 1e-12);
        let g = tape.backward().unwrap();
        let (g0, g1) = linreg_gradients(t0, t1, &xs, &ys).unwrap();
        assert!((g[&b].item() - g0).abs() < 1e-9);
        assert!((g[&w].item() - g1).abs() < 1e-9);
    }

    #[test]
    fn optimizer_examples() {
        let mut p = Matrix::scalar(1.0);
        let mut opt = OptimizerState::plain(0.1).unwrap();
        opt.update("t", &mut p, &Matrix::scalar(0.5)).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-15);

        let mut p = Matrix::scalar(0.0);
        let mut opt = OptimizerState::momentum(0.1, 0.9).unwrap();
        opt.update("t", &mut p, &Matrix::scalar(1.0)).unwrap();
        opt.update("t", &mut p, &Matrix::scalar(1.0)).unwrap();
        assert!((p.item() - (0.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn fit_line_recovers_slope_and_intercept() {
        let xs: Vec<f64> = (0..50).map(|i| -1.0 + 2.0 * i as f64 / 49.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let path = fit_line(&mut OptimizerState::plain(0.1).unwrap(), &xs, &ys, 500).unwrap();
        let (t0, t1) = *path.last().unwrap();
        assert!((t0 - 1.0).abs() < 1e-6 && (t1 - 2.0).abs() < 1e-6);
        assert!(fit_line(&mut OptimizerState::plain(0.1).unwrap(), &[], &[], 1).is_err());
    }

    #[test]
    fn plateau_halves_once_over_three_stalled_epochs() {
        let mut opt = OptimizerState::new(OptimizerKind::Plain, 0.4, Some(Plateau::new(0.5, 2))).unwrap();
        assert!(!opt.end_epoch(1.0));
        let reductions = [1.0, 1.2, 1.1].iter().filter(|&&c| opt.end_epoch(c)).count();
        assert_eq!(reductions, 1);
        assert_eq!(opt.eta, 0.2);
    }

    #[test]
    fn optimizer_rejects_bad_hyperparameters() {
        assert!(OptimizerState::plain(0.0).is_err());
        assert!(OptimizerState::momentum(0.1, 1.0).is_err());
        assert!(OptimizerState::new(OptimizerKind::Plain, 0.1, Some(Plateau::new(1.0, 2))).is_err());
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut rng = RngState::new(4);
        let mut a = Matrix::gaussian(3, 3, &mut rng);
        let mut b = a.clone();
        let mut plain = OptimizerState::plain(0.05).unwrap();
        let mut heavy = OptimizerState::momentum(0.05, 0.0).unwrap();
        for _ in 0..10 {
            let g = Matrix::gaussian(3, 3, &mut rng);
            plain.update("p", &mut a, &g).unwrap();
            heavy.update("p", &mut b, &g).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn descent_on_quadratic_decreases_cost() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 0.5).collect();
        let (mut t0, mut t1) = (2.0, -2.0);
        let mut prev = linreg_cost(t0, t1, &xs, &ys).unwrap();
        for _ in 0..200 {
            let (g0, g1) = linreg_gradients(t0, t1, &xs, &ys).unwrap();
            t0 -= 0.1 * g0;
            t1 -= 0.1 * g1;
            let c = linreg_cost(t0, t1, &xs, &ys).unwrap();
            if prev < 1e-20 {
                break;
            }
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(count_params(&[2, 4, 1]).unwrap(), 17);
        assert_eq!(count_params(&[1, 1]).unwrap(), 2);
        // Independent arithmetic: 768*3072 + 3072 + 3072*768 + 768.
        assert_eq!(count_params(&[768, 3072, 768]).unwrap(), 2_359_296 + 3072 + 2_359_296 + 768);
        assert_eq!(count_params(&[768, 3072, 768]).unwrap(), 4_722_432);
        assert!(count_params(&[5]).is_err());
        // Additive over layer boundaries.
        assert_eq!(
            count_params(&[3, 5, 2]).unwrap(),
            count_params(&[3, 5]).unwrap() + count_params(&[5, 2]).unwrap()
        );
    }

    #[test]
    fn layer_norm_examples() {
        let p = LayerNormParams::new(3);
        let out = layer_norm(&Matrix::filled(1, 3, 4.2), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let p = LayerNormParams::new(2);
        let out = layer_norm(&Matrix::from_rows(&[[1.0, -1.0]]).unwrap(), &p).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-5 && (out.get(0, 1) + 1.0).abs() < 1e-5);

        let mut rng = RngState::new(12);
        let x = Matrix::gaussian(6, 16, &mut rng).scale(3.0);
        let out = layer_norm(&x, &LayerNormParams::new(16)).unwrap();
        for r in 0..6 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dense_forward_matches_tape() {
        let mut rng = RngState::new(2);
        let layer = DenseLayer::new(4, 3, Some(ActivationKind::Tanh), &mut rng);
        let x = Matrix::gaussian(5, 4, &mut rng);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let xn = tape.constant(x.clone());
        let out = layer.on_tape(&mut tape, &mut binder, "d", xn);
        tape.forward_no_inputs().unwrap();
        assert_eq!(tape.value(out), &layer.forward(&x).unwrap());
        let bound = 0.5;
        assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
    }
}
