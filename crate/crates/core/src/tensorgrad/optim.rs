use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step-decayed learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub current_epoch: usize,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            base_lr: 3e-4,
            decay_factor: 0.5,
            decay_every_epochs: 5,
            current_epoch: 0,
        }
    }
}

impl OptimizerState {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::invalid("decay interval must be at least one epoch"));
        }
        Ok(())
    }

    /// `base_lr * decay_factor^floor(epoch / decay_every_epochs)`.
    pub fn effective_lr(&self) -> f64 {
        let stage = (self.current_epoch / self.decay_every_epochs) as i32;
        self.base_lr * self.decay_factor.powi(stage)
    }
}

/// Plain gradient descent: `p <- p - lr * grad`, then clears gradients.
pub fn optimizer_step(params: &mut ParamSet, state: &OptimizerState) -> Result<()> {
    check_grads(params)?;
    let lr = state.effective_lr();
    for (_, p) in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * g;
        }
    }
    Ok(())
}

fn check_grads(params: &ParamSet) -> Result<()> {
    match params.iter().find(|(_, p)| p.grad.is_none()) {
        Some((name, _)) => Err(Error::MissingGradient(name.to_string())),
        None => Ok(()),
    }
}

/// Update rule applied on top of the shared schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd,
    Adam,
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(UpdateRule::Sgd),
            "adam" => Ok(UpdateRule::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

/// Optimizer with persistent per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub rule: UpdateRule,
    pub schedule: OptimizerState,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, schedule: OptimizerState) -> Self {
        Optimizer {
            rule,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.schedule.current_epoch = epoch;
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        match self.rule {
            UpdateRule::Sgd => optimizer_step(params, &self.schedule),
            UpdateRule::Adam => self.adam_step(params),
        }
    }

    fn adam_step(&mut self, params: &mut ParamSet) -> Result<()> {
        check_grads(params)?;
        if self.first.is_empty() {
            for (_, p) in params.iter() {
                self.first.push(Tensor::zeros(p.value.shape()));
                self.second.push(Tensor::zeros(p.value.shape()));
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::invalid("parameter set changed between optimizer steps"));
        }
        self.step += 1;
        let lr = self.schedule.effective_lr();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_five_epochs() {
        let mut s = OptimizerState::default();
        assert_eq!(s.effective_lr(), 3e-4);
        s.current_epoch = 4;
        assert_eq!(s.effective_lr(), 3e-4);
        s.current_epoch = 5;
        assert_eq!(s.effective_lr(), 1.5e-4);
        s.current_epoch = 12;
        assert_eq!(s.effective_lr(), 7.5e-5);
    }

    #[test]
    fn sgd_moves_against_gradient_and_clears() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        params.iter_mut().next().unwrap().1.grad = Some(Tensor::new(vec![2], vec![10.0, 0.0]).unwrap());
        optimizer_step(&mut params, &OptimizerState::default()).unwrap();
        let w = params.get("w").unwrap().data().to_vec();
        assert_eq!(w, vec![1.0 - 3e-4 * 10.0, -1.0]);
        assert!(params.grad("w").is_none());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[3]));
        let err = optimizer_step(&mut params, &OptimizerState::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameter() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![0.5, 2.0]).unwrap());
        let mut opt = Optimizer::new(UpdateRule::Adam, OptimizerState::default());
        for _ in 0..3 {
            params.iter_mut().next().unwrap().1.grad = Some(Tensor::zeros(&[2]));
            opt.step(&mut params).unwrap();
        }
        assert_eq!(params.get("w").unwrap().data(), &[0.5, 2.0]);
    }
}
