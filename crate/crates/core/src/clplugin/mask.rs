use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};

pub const TAU_MIN: f64 = 0.0025;
pub const THETA: f64 = 0.5;

/// Sigmoid pseudo-gate `sigma(e / tau)`, entries in the open unit interval.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub values: Vec<f64>,
    pub tau: f64,
}

/// Thresholded task mask. `values` are exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardMask {
    pub values: Vec<f64>,
    pub theta: f64,
}

impl HardMask {
    pub fn from_bits(bits: &[bool], theta: f64) -> Self {
        HardMask {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            theta,
        }
    }

    pub fn bits(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v == 1.0).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn active(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn compute_soft_mask(embedding: &[f64], tau: f64) -> Result<SoftMask> {
    check_tau(tau)?;
    Ok(SoftMask {
        values: embedding.iter().map(|&e| sigmoid(e / tau)).collect(),
        tau,
    })
}

/// Records `sigma(e / tau)` on the tape so the loss can reach the embedding.
pub fn soft_mask_on_tape(g: &mut Graph, embedding: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let scaled = g.scale(embedding, 1.0 / tau);
    Ok(g.sigmoid(scaled))
}

/// Entry is 1 where `m >= theta`. The tie `m == theta` counts as used.
pub fn harden(mask: &SoftMask, theta: f64) -> Result<HardMask> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::contract(format!("threshold must lie in (0, 1), got {theta}")));
    }
    Ok(HardMask {
        values: mask.values.iter().map(|&m| if m >= theta { 1.0 } else { 0.0 }).collect(),
        theta,
    })
}

/// `o = k * m`, the mask broadcast over the batch rows of `k`.
pub fn apply_mask(g: &mut Graph, k: Var, mask: Var) -> Result<Var> {
    g.mul_row(k, mask)
}

/// Linear decay of the temperature from 1 to `tau_min` across one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_max: f64,
    pub tau_min: f64,
    pub total_steps: usize,
}

impl TemperatureSchedule {
    pub fn new(tau_min: f64, total_steps: usize) -> Result<Self> {
        check_tau(tau_min)?;
        if tau_min >= 1.0 {
            return Err(Error::contract(format!("tau_min must be below 1, got {tau_min}")));
        }
        if total_steps == 0 {
            return Err(Error::contract("temperature schedule needs at least one step"));
        }
        Ok(TemperatureSchedule {
            tau_max: 1.0,
            tau_min,
            total_steps,
        })
    }

    pub fn at(&self, step: usize) -> Result<f64> {
        anneal(step, self.total_steps, self)
    }
}

pub fn anneal(step: usize, total_steps: usize, schedule: &TemperatureSchedule) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::contract(format!(
            "annealing step {step} outside 0..{total_steps}"
        )));
    }
    if step == total_steps - 1 {
        return Ok(schedule.tau_min);
    }
    let frac = step as f64 / (total_steps - 1) as f64;
    Ok(schedule.tau_max + (schedule.tau_min - schedule.tau_max) * frac)
}
