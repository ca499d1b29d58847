//! Adam and per-epoch learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::{Grads, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }
}

/// One bias-corrected Adam update of every trainable parameter in `grads`.
///
/// The whole update is rejected, leaving `params` and `state` untouched, if
/// any gradient is non-finite or mis-shaped.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .param(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name:?}")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name:?} has shape {:?}, parameter {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {name:?} at index {i} is {}",
                g.data()[i]
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if !params.param(name).is_some_and(|p| p.trainable) {
            continue;
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
        }
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
        }
        let (m, v) = (&state.first[name], &state.second[name]);
        let data = params.data_mut(name).expect("checked above");
        for ((p, mv), vv) in data.iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    WarmupCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: u32,
    pub warmup_epochs: u32,
    pub start_factor: f64,
}

impl ScheduleSpec {
    pub fn cosine(base_lr: f64, min_lr: f64, total_epochs: u32) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base_lr,
            min_lr,
            total_epochs,
            warmup_epochs: 0,
            start_factor: 1.0,
        }
    }

    pub fn warmup_cosine(
        base_lr: f64,
        min_lr: f64,
        total_epochs: u32,
        warmup_epochs: u32,
        start_factor: f64,
    ) -> Self {
        Self {
            kind: ScheduleKind::WarmupCosine,
            base_lr,
            min_lr,
            total_epochs,
            warmup_epochs,
            start_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "schedule needs 0 < min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        let warmup = self.effective_warmup();
        if warmup >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup of {warmup} epochs leaves no cosine phase in {}",
                self.total_epochs
            )));
        }
        if !(self.start_factor > 0.0 && self.start_factor <= 1.0) {
            return Err(Error::Config(format!(
                "start factor must lie in (0, 1], got {}",
                self.start_factor
            )));
        }
        Ok(())
    }

    fn effective_warmup(&self) -> u32 {
        match self.kind {
            ScheduleKind::Cosine => 0,
            ScheduleKind::WarmupCosine => self.warmup_epochs,
        }
    }
}

/// Learning rate for `epoch` in `0..=total_epochs`.
pub fn lr_at(spec: &ScheduleSpec, epoch: u32) -> Result<f64> {
    spec.validate()?;
    if epoch > spec.total_epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} beyond schedule of {} epochs",
            spec.total_epochs
        )));
    }
    let warmup = spec.effective_warmup();
    if epoch < warmup {
        let frac = epoch as f64 / warmup as f64;
        let factor = spec.start_factor + (1.0 - spec.start_factor) * frac;
        return Ok(spec.base_lr * factor);
    }
    let span = (spec.total_epochs - warmup) as f64;
    let tau = (epoch - warmup) as f64 / span;
    Ok(spec.min_lr + 0.5 * (spec.base_lr - spec.min_lr) * (1.0 + (PI * tau).cos()))
}
