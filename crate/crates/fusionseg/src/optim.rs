//! Loss, regularization, optimizer, learning-rate schedule, and weight
//! initialization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::softmax_channels;
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{Labels, Tensor, IGNORE_LABEL};

/// Loss reduction. Sum form matches the published learning-rate range;
/// mean form divides by the non-ignored pixel count (sum-form gradients
/// scale with patch size, which is the trade-off behind the flag).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Cross-entropy over softmax, fused: returns the loss and the gradient
/// w.r.t. the logits, (y - z) at non-ignored pixels and 0 elsewhere.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Labels,
    ignore_label: u8,
    reduction: Reduction,
) -> Result<(T, Tensor<T>)> {
    let (n, k, h, w) = logits.shape();
    if (labels.n, labels.h, labels.w) != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs labels ({}, {}, {})",
            logits.shape(),
            labels.n, labels.h, labels.w
        )));
    }
    let y = softmax_channels(logits);
    let mut grad = y.clone();
    let plane = h * w;
    let mut loss = T::zero();
    let mut counted = 0usize;
    for i in 0..n {
        let base = grad.index(i, 0, 0, 0);
        for px in 0..plane {
            let label = labels.data[i * plane + px];
            if label == ignore_label {
                for ch in 0..k {
                    grad.data_mut()[base + ch * plane + px] = T::zero();
                }
                continue;
            }
            if label as usize >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
            counted += 1;
            let j = base + label as usize * plane + px;
            // ln of a stabilized softmax value; clamp guards exact zeros
            let p = y.data()[j].max(T::from_f64(f64::MIN_POSITIVE));
            loss -= p.ln();
            grad.data_mut()[j] -= T::one();
        }
    }
    if counted == 0 {
        return Err(Error::AllPixelsIgnored);
    }
    if reduction == Reduction::Mean {
        let scale = T::from_f64(1.0 / counted as f64);
        loss = loss * scale;
        for g in grad.data_mut() {
            *g *= scale;
        }
    }
    Ok((loss, grad))
}

/// Squared-L2 weight penalty: lambda * sum(w^2). The gradient contribution
/// is 2*lambda*w per weight (no 1/2 convention). Batch-norm scale/shift and
/// biases are excluded by the caller.
pub fn l2_penalty<T: Scalar>(weights: &[&Tensor<T>], lambda: T) -> T {
    let mut sq = T::zero();
    for w in weights {
        sq += w.data().iter().map(|&v| v * v).sum();
    }
    lambda * sq
}

/// Adds the weight-decay gradient 2*lambda*w into `grad`.
pub fn add_l2_grad<T: Scalar>(weights: &Tensor<T>, lambda: T, grad: &mut Tensor<T>) -> Result<()> {
    if weights.shape() != grad.shape() {
        return Err(Error::ShapeMismatch("l2 grad shape".into()));
    }
    let two = T::from_f64(2.0);
    for (g, &w) in grad.data_mut().iter_mut().zip(weights.data()) {
        *g += two * lambda * w;
    }
    Ok(())
}

/// Momentum SGD state: velocity tensors mirror parameter shapes exactly.
/// Update: v <- -eta*grad + momentum*v; w <- w + v.
#[derive(Debug, Clone)]
pub struct SGDState<T> {
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub eta: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> SGDState<T> {
    pub fn new(eta: T, momentum: T, weight_decay: T) -> Self {
        SGDState { velocity: BTreeMap::new(), eta, momentum, weight_decay }
    }

    /// One update step. `grads` must already include the weight-decay term.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, param) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("no gradient for parameter '{name}'")))?;
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} != parameter shape {:?} for '{name}'",
                    grad.shape(),
                    param.shape()
                )));
            }
            let (n, c, h, w) = param.shape();
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(n, c, h, w));
            for ((vv, &g), p) in v.data_mut().iter_mut().zip(grad.data()).zip(param.data_mut()) {
                *vv = self.momentum * *vv - self.eta * g;
                *p += *vv;
            }
        }
        Ok(())
    }
}

/// Logarithmic learning-rate decay: one multiplicative step per epoch,
/// endpoints pinned to eta_start at epoch 0 and eta_end at the last epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LRSchedule {
    pub eta_start: f64,
    pub eta_end: f64,
    pub num_epochs: usize,
}

impl Default for LRSchedule {
    fn default() -> Self {
        LRSchedule { eta_start: 1e-6, eta_end: 1e-7, num_epochs: 50 }
    }
}

impl LRSchedule {
    /// eta(t) = eta_start * (eta_end/eta_start)^(t/(num_epochs-1)).
    pub fn lr_at_epoch(&self, t: usize) -> Result<f64> {
        if t >= self.num_epochs {
            return Err(Error::EpochOutOfRange { t, num_epochs: self.num_epochs });
        }
        if self.num_epochs == 1 {
            return Ok(self.eta_start);
        }
        let frac = t as f64 / (self.num_epochs - 1) as f64;
        Ok(self.eta_start * (self.eta_end / self.eta_start).powf(frac))
    }
}

/// Xavier (Glorot) uniform initialization on
/// [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].
/// For conv filters, fan_in = C*F'^2 and fan_out = K*F'^2 with F' the
/// effective (dilated) filter width. Draws are made in f64 order, so the
/// sample sequence is identical across scalar types.
pub fn xavier_init<T: Scalar>(
    shape: (usize, usize, usize, usize),
    fan_in: usize,
    fan_out: usize,
    rng: &mut CounterRng,
) -> Tensor<T> {
    assert!(fan_in >= 1 && fan_out >= 1);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let (n, c, h, w) = shape;
    let mut t = Tensor::zeros(n, c, h, w);
    for v in t.data_mut() {
        *v = T::from_f64(rng.uniform(-bound, bound));
    }
    t
}

/// Convenience: default ignore marker for loss computations.
pub fn default_ignore() -> u8 {
    IGNORE_LABEL
}
