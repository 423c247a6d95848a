use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn word_level() -> Self {
        OptimizerConfig {
            learning_rate: 2e-3,
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-9,
            weight_decay: 0.0,
        }
    }

    pub fn char_level() -> Self {
        OptimizerConfig {
            beta2: 0.99,
            epsilon: 1e-5,
            ..Self::word_level()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Contract(format!("beta1 must be in [0, 1), got {}", self.beta1)));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Contract(format!("beta2 must be in (0, 1), got {}", self.beta2)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Contract(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Contract(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moment accumulators, one pair per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update. `grads` are raw loss gradients in store order; L2 weight
/// decay is added here for non-bias parameters.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    config: &OptimizerConfig,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.v.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.len() {
            return Err(Error::dim(
                "adam_step",
                format!("gradient of `{}` has {} entries, expected {}", p.name, g.len(), p.value.len()),
            ));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at coordinate {i} of parameter `{}`",
                g[i], p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let decay = match p.role {
            ParamRole::Weight => config.weight_decay,
            ParamRole::Bias => 0.0,
        };
        let theta = p.value.data_mut();
        for (((th, &gi), mi), vi) in theta
            .iter_mut()
            .zip(g)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gi + decay * *th;
            *mi = (1.0 - b1) * g + b1 * *mi;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / correct1;
            let v_hat = *vi / correct2;
            *th -= learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Plateau detector: after `patience` consecutive checkpoints without a new
/// best, the learning rate is multiplied by `factor` and the count restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub best: f64,
    pub since_best: usize,
    pub patience: usize,
    pub factor: f64,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauSchedule {
            best: f64::INFINITY,
            since_best: 0,
            patience,
            factor,
        }
    }

    /// Record a checkpoint's validation NLL and return the learning rate to use next.
    pub fn observe(&mut self, valid_nll: f64, lr: f64) -> f64 {
        if valid_nll < self.best {
            self.best = valid_nll;
            self.since_best = 0;
            return lr;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            self.since_best = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Replay `history` through a fresh [`PlateauSchedule`] starting from `lr`.
pub fn maybe_decay_lr(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    let mut schedule = PlateauSchedule::new(patience, factor);
    history.iter().fold(lr, |lr, &nll| schedule.observe(nll, lr))
}
