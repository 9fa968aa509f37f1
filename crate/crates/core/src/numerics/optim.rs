use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], cfg: AdamConfig) -> Self {
        Self {
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }
}

/// One bias-corrected Adam update over parallel slices of parameters and gradients.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::shape(format!(
                "adam slot {i}: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.first_moment[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam bound to a subset of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    ids: Vec<ParamId>,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let tensors: Vec<&Tensor> = ids.iter().map(|&id| store.get(id)).collect();
        let state = OptimizerState::new(&tensors, cfg);
        Self { ids, state }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let mut values: Vec<Tensor> = self.ids.iter().map(|&id| store.get(id).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            let g: Vec<&Tensor> = self.ids.iter().map(|&id| grads.get(id)).collect();
            adam_step(&mut refs, &g, &mut self.state, lr)?;
        }
        for (&id, v) in self.ids.iter().zip(values) {
            *store.get_mut(id) = v;
        }
        Ok(())
    }
}

/// Exponential moving average of parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, params: &[Tensor]) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::contract(format!("EMA decay must be in (0,1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.to_vec(),
        })
    }

    pub fn from_store(decay: f64, store: &ParamStore) -> Result<Self> {
        let values: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
        Self::new(decay, &values)
    }

    /// `shadow ← decay·shadow + (1−decay)·params`.
    pub fn update(&mut self, params: &[&Tensor]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::shape(format!(
                "EMA tracks {} tensors, got {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (s, p) in self.shadow.iter().zip(params) {
            if s.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "EMA shadow {:?} vs param {:?}",
                    s.shape(),
                    p.shape()
                )));
            }
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }

    pub fn update_from_store(&mut self, store: &ParamStore) -> Result<()> {
        let refs: Vec<&Tensor> = store.iter().map(|(_, p)| &p.value).collect();
        self.update(&refs)
    }

    /// A copy of `store` holding the shadow values.
    pub fn apply_to(&self, store: &ParamStore) -> Result<ParamStore> {
        if store.len() != self.shadow.len() {
            return Err(Error::shape("EMA shadow count differs from store"));
        }
        let mut out = store.clone();
        for (id, s) in store.ids().zip(&self.shadow) {
            *out.get_mut(id) = s.clone();
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Transformer,
    ConstantWithLinearWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn transformer(peak_lr: f64, warmup_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            kind: ScheduleKind::Transformer,
        }
    }

    pub fn constant_with_warmup(peak_lr: f64, warmup_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            kind: ScheduleKind::ConstantWithLinearWarmup,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || self.warmup_steps == 0 {
            return Err(Error::contract(format!(
                "schedule needs peak_lr > 0 and warmup_steps > 0, got {} / {}",
                self.peak_lr, self.warmup_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at a 1-based step.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step == 0 {
            return Err(Error::contract("learning-rate steps start at 1"));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        let factor = match self.kind {
            ScheduleKind::Transformer => (s / w).min((w / s).sqrt()),
            ScheduleKind::ConstantWithLinearWarmup => (s / w).min(1.0),
        };
        Ok(self.peak_lr * factor)
    }
}
