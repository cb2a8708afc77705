use std::collections::HashMap;

use super::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Learning rate for each parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroupRates {
    pub backbone: f32,
    pub module: f32,
}

impl ParamGroupRates {
    pub fn uniform(lr: f32) -> Self {
        ParamGroupRates {
            backbone: lr,
            module: lr,
        }
    }

    pub fn for_group(&self, group: ParamGroup) -> f32 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Module => self.module,
        }
    }

    pub fn scaled(&self, factor: f32) -> Self {
        ParamGroupRates {
            backbone: self.backbone * factor,
            module: self.module * factor,
        }
    }
}

/// Step decay: the rate is multiplied by `decay` once at 50% and again at 75%
/// of `total_epochs`.
pub fn lr_multiplier(epoch: usize, total_epochs: usize, decay: f32) -> f32 {
    let mut m = 1.0;
    for milestone in [total_epochs / 2, total_epochs * 3 / 4] {
        if total_epochs > 1 && milestone > 0 && epoch >= milestone {
            m *= decay;
        }
    }
    m
}

/// SGD with momentum, L2 weight decay and optional Nesterov lookahead.
///
/// With `g' = g + wd·p`, one step is
///
/// ```text
/// v ← μ·v − lr·g'
/// p ← p + μ·v − lr·g'      (Nesterov)
/// p ← p + v                (classical momentum)
/// ```
///
/// which is the same trajectory as the `v ← μv + g'; p ← p − lr(g' + μv)`
/// formulation for a constant learning rate.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub rates: ParamGroupRates,
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
    /// Names of the parameters this optimizer updates.
    members: Vec<String>,
    velocity: HashMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(
        members: impl IntoIterator<Item = String>,
        rates: ParamGroupRates,
        momentum: f32,
        weight_decay: f32,
        nesterov: bool,
    ) -> Self {
        OptimizerState {
            rates,
            momentum,
            weight_decay,
            nesterov,
            members: members.into_iter().collect(),
            velocity: HashMap::new(),
        }
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<f32>> {
        self.velocity.get(name)
    }

    /// Apply one update to every member parameter. Fails without touching
    /// anything if a member has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for name in &self.members {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Contract(format!("optimizer member `{}` not in store", name)))?;
            if p.grad.is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for name in &self.members {
            let p = store.get_mut(name).expect("checked above");
            let lr = self.rates.for_group(p.group);
            let grad = p.grad.as_ref().expect("checked above");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            debug_assert_eq!(v.shape(), p.value.shape());
            for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                let g = g + wd * *w;
                *vel = mu * *vel - lr * g;
                if self.nesterov {
                    *w += mu * *vel - lr * g;
                } else {
                    *w += *vel;
                }
            }
        }
        Ok(())
    }
}
