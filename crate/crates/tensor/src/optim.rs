//! SGD with momentum and Adam over a [`ParamStore`].

use crate::error::{invalid, Result, TensorError};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
    SgdMomentum { momentum: f32, weight_decay: f32 },
    /// Bias-corrected Adam.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f32) -> Self {
        Self::SgdMomentum { momentum, weight_decay: 0.0 }
    }

    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state bound to one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    steps: u64,
    store: Option<u64>,
    first: Vec<Option<Vec<f32>>>,
    second: Vec<Option<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self { kind, lr, steps: 0, store: None, first: Vec::new(), second: Vec::new() }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment buffer for a parameter, if it has been updated at least once.
    pub fn moment(&self, id: ParamId) -> Option<&[f32]> {
        self.first.get(id.0).and_then(|m| m.as_deref())
    }

    /// Applies one update to every parameter holding a gradient, then clears
    /// all gradients. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        match self.store {
            Some(id) if id != store.store_id() => {
                return Err(invalid("optimizer", "state belongs to a different parameter store"));
            }
            _ => self.store = Some(store.store_id()),
        }
        if !store.has_any_grad() {
            return Err(TensorError::MissingGrads);
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.steps += 1;
        let t = self.steps as i32;
        let ids: Vec<ParamId> = store.param_ids().collect();
        for id in ids {
            let (value, grad) = store.value_and_grad_mut(id);
            let Some(grad) = grad else { continue };
            let (p, g) = (value.data_mut(), grad.data());
            match self.kind {
                OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                    let v = self.first[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
                    for i in 0..p.len() {
                        v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
                        p[i] -= self.lr * v[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
                    let v = self.second[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            value.ensure_finite("optimizer_step")?;
        }
        store.zero_grad();
        Ok(())
    }
}
