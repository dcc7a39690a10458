use crate::compute::{Real, Tensor};
use crate::model::Param;

use super::{TrainConfig, TrainError};

/// Learning rate for optimizer step `step` (0-based) out of `total_steps`:
/// linear warmup from 0 over `floor(warmup_frac * total_steps)` steps, then
/// linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_frac * total_steps as f64).floor() as usize;
    let step = step.min(total_steps);
    if step < warmup {
        config.lr * step as f64 / warmup as f64
    } else if total_steps == warmup {
        config.lr
    } else {
        config.lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        let c = T::lit(coef);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * c);
        }
    }
    norm
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[Param<T>], config: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            beta1: T::lit(config.adam_beta1),
            beta2: T::lit(config.adam_beta2),
            eps: T::lit(config.adam_eps),
            weight_decay: T::lit(config.weight_decay),
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Parameters without `decay` skip weight decay. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>], lr: T) -> Result<(), TrainError> {
        if grads.len() != params.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.tensor.shape() != g.shape() {
                return Err(TrainError::ShapeMismatch(format!(
                    "gradient {:?} for {} {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: p.name.clone() });
            }
        }
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if p.decay { self.weight_decay } else { T::zero() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * *w);
            }
        }
        Ok(())
    }
}
