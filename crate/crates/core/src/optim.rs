//! AdamW with per-group learning rates and a cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{param_group, Model, ParamGroup};
use crate::tensor::Tensor;

/// Cosine annealing from `base` at step 0 down to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Learning rate for each optimizer group at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLr {
    pub backbone: f64,
    pub neck: f64,
    pub classifier: f64,
}

impl GroupLr {
    pub fn uniform(lr: f64) -> Self {
        Self {
            backbone: lr,
            neck: lr,
            classifier: lr,
        }
    }

    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Neck => self.neck,
            ParamGroup::Classifier => self.classifier,
            ParamGroup::Buffer => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable tensor in `model`. Tensors whose group
    /// learning rate is zero are left untouched, moments included.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Tensor>,
        lr: GroupLr,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in model.tensors.iter_mut() {
            let group = param_group(name);
            let rate = lr.of(group);
            if group == ParamGroup::Buffer || rate == 0.0 {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidData(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= rate * self.weight_decay * *w;
                *w -= rate * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
