use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::graph::Grads;
use crate::tensor::Tensor;

/// `lr(epoch) = base_lr * gamma^floor(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepLrSchedule {
    pub base_lr: f64,
    pub step_epochs: usize,
    pub gamma: f64,
}

impl StepLrSchedule {
    pub fn new(base_lr: f64, step_epochs: usize, gamma: f64) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) || step_epochs == 0 || !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!(
                "invalid step schedule: base {base_lr}, step {step_epochs}, gamma {gamma}"
            )));
        }
        Ok(Self { base_lr, step_epochs, gamma })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_epochs) as i32)
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, lr, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` using `grads[name]`.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Grads) -> Result<()> {
        for (name, p) in &params {
            match grads.get(name) {
                None => return Err(Error::Registry(format!("no gradient for parameter `{name}`"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::Registry(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let g = &grads[&name];
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((pv, mv), vv), &gv) in it {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
