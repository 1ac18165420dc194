//! Layers and losses built on [`Tape`] primitives.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::{sigmoid, softplus, Matrix};
use super::tape::{ParamId, ParamStore, Tape, Var};
use super::NumericError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform Glorot initialization, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.rows()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.cols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumericError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive
/// layers and none after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]` gives `widths.len() - 1` layers.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

pub fn mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    mlp: &Mlp,
    activation: Activation,
) -> Result<Var, NumericError> {
    let mut h = x;
    let last = mlp.layers.len().saturating_sub(1);
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = layer.forward(tape, store, h)?;
        if i < last {
            h = activation.apply(tape, h);
        }
    }
    Ok(h)
}

/// Gain and bias of a layer norm over `width` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumericError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

fn check_targets(input: &Matrix, targets: &Matrix, weights: &Matrix, op: &'static str) -> Result<(), NumericError> {
    input.same_shape(targets, op)?;
    input.same_shape(weights, op)
}

/// Sigmoid focal loss on logits, averaged over entries with nonzero weight
/// (each entry contributes `weight · loss`, normalized by the weight sum).
/// Targets equal to 1 are positives, anything else negative.
pub fn focal_loss_logits(
    tape: &mut Tape,
    logits: Var,
    targets: &Matrix,
    weights: &Matrix,
    alpha: f64,
    gamma: f64,
) -> Result<Var, NumericError> {
    let x = tape.value(logits);
    check_targets(x, targets, weights, "focal_loss_logits")?;
    let norm: f64 = weights.sum();
    let mut coeff = Matrix::zeros(x.rows(), x.cols());
    let mut total = 0.0;
    if norm > 0.0 {
        for (((c, &xv), &y), &w) in coeff
            .data_mut()
            .iter_mut()
            .zip(x.data())
            .zip(targets.data())
            .zip(weights.data())
        {
            if w == 0.0 {
                continue;
            }
            let p = sigmoid(xv);
            let (loss, grad) = if y == 1.0 {
                let log_p = -softplus(-xv);
                let m = (1.0 - p).powf(gamma);
                (alpha * m * -log_p, alpha * m * (gamma * p * log_p - (1.0 - p)))
            } else {
                let log_q = -softplus(xv);
                let m = p.powf(gamma);
                (
                    (1.0 - alpha) * m * -log_q,
                    (1.0 - alpha) * m * (p - gamma * (1.0 - p) * log_q),
                )
            };
            total += w * loss;
            *c = w * grad / norm;
        }
    }
    let loss = if norm > 0.0 { total / norm } else { 0.0 };
    Ok(tape.reduce(logits, loss, coeff))
}

/// Focal loss on values already interpreted as probabilities. Inputs are
/// clamped to `[eps, 1 - eps]`; clamped entries pass no gradient.
pub fn focal_loss_probs(
    tape: &mut Tape,
    probs: Var,
    targets: &Matrix,
    weights: &Matrix,
    alpha: f64,
    gamma: f64,
    eps: f64,
) -> Result<Var, NumericError> {
    let pm = tape.value(probs);
    check_targets(pm, targets, weights, "focal_loss_probs")?;
    let norm: f64 = weights.sum();
    let mut coeff = Matrix::zeros(pm.rows(), pm.cols());
    let mut total = 0.0;
    let mut margin = Vec::new();
    if norm > 0.0 {
        for (((c, &raw), &y), &w) in coeff
            .data_mut()
            .iter_mut()
            .zip(pm.data())
            .zip(targets.data())
            .zip(weights.data())
        {
            if w == 0.0 {
                continue;
            }
            margin.extend([raw - eps, raw - (1.0 - eps)]);
            let inside = raw > eps && raw < 1.0 - eps;
            let p = raw.clamp(eps, 1.0 - eps);
            let (loss, grad) = if y == 1.0 {
                let q = 1.0 - p;
                let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
                (-alpha * q.powf(gamma) * p.ln(), -alpha * (q.powf(gamma) / p - dq))
            } else {
                let q = 1.0 - p;
                let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) * q.ln() };
                (
                    -(1.0 - alpha) * p.powf(gamma) * q.ln(),
                    -(1.0 - alpha) * (dp - p.powf(gamma) / q),
                )
            };
            total += w * loss;
            if inside {
                *c = w * grad / norm;
            }
        }
    }
    let loss = if norm > 0.0 { total / norm } else { 0.0 };
    tape.note_kink_distances(margin);
    Ok(tape.reduce(probs, loss, coeff))
}

/// Weighted mean absolute difference.
pub fn l1_loss_weighted(
    tape: &mut Tape,
    pred: Var,
    target: &Matrix,
    weights: &Matrix,
) -> Result<Var, NumericError> {
    let pm = tape.value(pred);
    check_targets(pm, target, weights, "l1_loss")?;
    let norm = weights.sum();
    let mut coeff = Matrix::zeros(pm.rows(), pm.cols());
    let mut total = 0.0;
    let mut margin = Vec::new();
    if norm > 0.0 {
        for (((c, &p), &t), &w) in coeff
            .data_mut()
            .iter_mut()
            .zip(pm.data())
            .zip(target.data())
            .zip(weights.data())
        {
            if w == 0.0 {
                continue;
            }
            let diff = p - t;
            margin.push(diff);
            total += w * diff.abs();
            *c = w * diff.signum() / norm;
        }
    }
    let loss = if norm > 0.0 { total / norm } else { 0.0 };
    tape.note_kink_distances(margin);
    Ok(tape.reduce(pred, loss, coeff))
}

/// Mean sigmoid focal loss over all entries of `logits`.
pub fn sigmoid_focal_loss(
    logits: &Matrix,
    targets: &Matrix,
    alpha: f64,
    gamma: f64,
) -> Result<f64, NumericError> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let w = Matrix::filled(logits.rows(), logits.cols(), 1.0);
    let l = focal_loss_logits(&mut tape, x, targets, &w, alpha, gamma)?;
    Ok(tape.scalar(l))
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Matrix, target: &Matrix) -> Result<f64, NumericError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let w = Matrix::filled(pred.rows(), pred.cols(), 1.0);
    let l = l1_loss_weighted(&mut tape, p, target, &w)?;
    Ok(tape.scalar(l))
}
