//! AdamW with decoupled weight decay and the warm-up plus cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter. Decay uses the pre-update value.
    pub fn step(&self, params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Argument(format!("learning rate must be non-negative, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::Count(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
                return Err(Error::dim(
                    "adamw_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
            let theta = p.data_mut();
            for (((th, &gi), mi), vi) in theta
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                let old = *th;
                *th = old - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * self.weight_decay * old;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint ℓ2 norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warm-up over `warmup` epochs, then half-cosine decay to the end.
pub fn cosine_warmup_lr(epoch: usize, base_lr: f64, warmup: usize, epochs: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside 0..{epochs}")));
    }
    if warmup >= epochs {
        return Err(Error::Config(format!("warm-up {warmup} must be shorter than {epochs} epochs")));
    }
    if epoch < warmup {
        return Ok((epoch + 1) as f64 / warmup as f64 * base_lr);
    }
    let frac = (epoch - warmup) as f64 / (epochs - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * frac).cos()))
}
