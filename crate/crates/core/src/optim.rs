//! SGD with momentum, L2 weight decay and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `base * 0.5 * (1 + cos(pi * step / total))`.
    Cosine,
    /// `base * gamma^k`, `k` = number of milestones (in steps) already reached.
    Step { milestones: Vec<usize>, gamma: f64 },
    Constant,
}

pub fn lr_at(schedule: &LrSchedule, base_lr: f64, step: usize, total_steps: usize) -> f64 {
    match schedule {
        LrSchedule::Cosine => {
            if total_steps == 0 {
                return base_lr;
            }
            let t = step.min(total_steps) as f64 / total_steps as f64;
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
        LrSchedule::Step { milestones, gamma } => {
            let passed = milestones.iter().filter(|&&m| step >= m).count();
            base_lr * gamma.powi(passed as i32)
        }
        LrSchedule::Constant => base_lr,
    }
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`. Parameters whose
/// role does not decay skip the `wd * w` term.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor4<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &Params<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
        }
    }

    /// `grads[i]` belongs to `params.params[i]`; `None` counts as zero.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Option<Tensor4<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "sgd",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        let mu = T::lit(self.momentum);
        let lr = T::lit(lr);
        for ((p, g), v) in params.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = T::lit(if p.role.decays() { self.weight_decay } else { 0.0 });
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("sgd", p.value.shape(), g.shape()));
                }
            }
            let w = p.value.data_mut();
            let vel = v.data_mut();
            for i in 0..w.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
                vel[i] = mu * vel[i] + (gi + wd * w[i]);
                w[i] = w[i] - lr * vel[i];
            }
        }
        Ok(())
    }
}
