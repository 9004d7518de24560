//! Adam updates, the exponential learning-rate schedule, and the L2 penalty
//! applied to convolutional kernels and biases.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameters (or their gradients), ordered by name.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// Everything the training loop needs besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate (must be positive).
    pub lr0: f64,
    /// Exponential decay strength; 0 disables decay.
    pub decay_k: f64,
    /// Steps per decay increment (staircase granularity).
    pub decay_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Stop after this many consecutive epochs of perfect training F2;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-5,
            decay_k: 0.0,
            decay_steps: 1,
            batch_size: 8,
            max_epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay_k >= 0.0) {
            return Err(Error::Config(format!(
                "decay_k must be nonnegative, got {}",
                self.decay_k
            )));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::Config(format!(
                    "{name} must lie in (0, 1), got {beta}"
                )));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::Config(format!(
                "eps_adam must be positive, got {}",
                self.eps_adam
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`: `lr0 * exp(-k * floor(step / decay_steps))`.
/// The floor makes decay a staircase over blocks of `decay_steps` steps;
/// `k = 0` keeps the rate constant.
pub fn lr_schedule(lr0: f64, k: f64, step: usize, decay_steps: usize) -> f64 {
    assert!(decay_steps >= 1, "decay_steps must be >= 1");
    lr0 * (-k * (step / decay_steps) as f64).exp()
}

/// Adam moment estimates, one pair per parameter, plus the step counter.
/// Moments are allocated lazily on the first step so the state needs no
/// knowledge of the model layout up front.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    m: ParamMap<T>,
    v: ParamMap<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter in `params`.
///
/// `grads` must hold exactly one finite gradient per parameter, shape-matched;
/// anything else is an error (non-finite gradients name the parameter).
pub fn adam_step<T: Scalar>(
    params: &mut ParamMap<T>,
    grads: &ParamMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        let extra = grads
            .keys()
            .find(|k| !params.contains_key(*k))
            .cloned()
            .unwrap_or_else(|| "<none>".into());
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} parameters (unmatched: {extra})",
            grads.len(),
            params.len()
        )));
    }

    let t = state.step + 1;
    let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t as f64));
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::one() - b1;
    let one_m_b2 = T::one() - b2;
    let eps = T::from_f64(cfg.eps_adam);
    let lr_t = T::from_f64(lr);

    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no gradient for parameter {name}")))?;
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient {
                parameter: name.clone(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// L2 penalty `rc * sum(p^2)` over the parameters selected by `regularized`,
/// with the matching gradient contribution `2 * rc * p` per selected
/// parameter. The model passes a selector that picks conv kernels and biases;
/// fully connected weights never enter the penalty.
pub fn l2_penalty<T: Scalar>(
    params: &ParamMap<T>,
    regularized: impl Fn(&str) -> bool,
    rc: f64,
) -> (T, ParamMap<T>) {
    if rc == 0.0 {
        return (T::zero(), BTreeMap::new());
    }
    let rc_t = T::from_f64(rc);
    let two_rc = T::from_f64(2.0 * rc);
    let mut loss = T::zero();
    let mut grads = BTreeMap::new();
    for (name, p) in params {
        if !regularized(name) {
            continue;
        }
        loss += rc_t * p.data().iter().map(|&v| v * v).sum::<T>();
        grads.insert(name.clone(), p.map(|v| two_rc * v));
    }
    (loss, grads)
}
