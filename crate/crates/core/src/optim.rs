//! Adam with coupled L2 weight decay and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epochs between learning-rate decays.
pub const LR_DECAY_EVERY: usize = 20;
pub const LR_DECAY_FACTOR: f64 = 0.1;

/// `base_lr * 0.1^floor(epoch / 20)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    base_lr * LR_DECAY_FACTOR.powi((epoch / LR_DECAY_EVERY) as i32)
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first_moment: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. The gradient seen by the moments is
    /// `grad + weight_decay * param`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "adam needs lr >= 0 and weight_decay >= 0, got lr={lr}, weight_decay={weight_decay}"
            )));
        }
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam tracks {} parameters but got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first_moment[i].shape() || g.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "adam parameter {i}: state {:?}, param {:?}, grad {:?}",
                    self.first_moment[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gd = gv + weight_decay * *pv;
                *mv = b1 * *mv + (1.0 - b1) * gd;
                *vv = b2 * *vv + (1.0 - b2) * gd * gd;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
