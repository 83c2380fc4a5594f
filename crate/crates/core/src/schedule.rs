//! Sparsity ramps, the per-step rank budget, and rank allocation driven by
//! layer-wise reconstruction error.

use serde::{Deserialize, Serialize};

use crate::error::{LosaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cubic,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub theta_f: f64,
    pub omega_1: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            theta_f: 0.7,
            omega_1: 6.0,
            kind: ScheduleKind::Cubic,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(LosaError::Config("schedule.steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_f) {
            return Err(LosaError::Config(format!(
                "schedule.theta_f must be in [0, 1], got {}",
                self.theta_f
            )));
        }
        if !(self.omega_1 >= 1.0 && self.omega_1.is_finite()) {
            return Err(LosaError::Config(format!(
                "schedule.omega_1 must be >= 1, got {}",
                self.omega_1
            )));
        }
        Ok(())
    }

    pub fn theta(&self, t: usize) -> Result<f64> {
        match self.kind {
            ScheduleKind::Cubic => cubic_theta(t, self.steps, self.theta_f),
            ScheduleKind::Linear => linear_theta(t, self.steps, self.theta_f),
        }
    }
}

fn check_step(t: usize, total: usize) -> Result<()> {
    if t == 0 || t > total {
        return Err(LosaError::InvalidArgument(format!(
            "step {t} outside 1..={total}"
        )));
    }
    Ok(())
}

/// `Θᵗ = Θᶠ − Θᶠ(1 − t/T)³`.
pub fn cubic_theta(t: usize, total: usize, theta_f: f64) -> Result<f64> {
    check_step(t, total)?;
    let rest = 1.0 - t as f64 / total as f64;
    Ok(theta_f - theta_f * rest.powi(3))
}

/// `Θᵗ = Θᶠ · t/T`.
pub fn linear_theta(t: usize, total: usize, theta_f: f64) -> Result<f64> {
    check_step(t, total)?;
    Ok(theta_f * (t as f64 / total as f64))
}

/// `Ωᵗ = Ω¹ + (t − 1)`.
pub fn rank_budget(t: usize, omega_1: f64) -> f64 {
    omega_1 + t.saturating_sub(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub r: Vec<usize>,
    pub omega: f64,
    /// All losses were zero, so the uniform profile was used.
    pub degenerate: bool,
}

impl RankProfile {
    pub fn mean(&self) -> f64 {
        self.r.iter().sum::<usize>() as f64 / self.r.len() as f64
    }
}

/// `r_i = round_half_even(L_i / L_avg · Ω)`, then capped at `caps[i]`.
/// No re-normalization of the total after rounding or capping.
pub fn allocate_ranks(losses: &[f64], omega: f64, caps: &[usize]) -> Result<RankProfile> {
    if losses.is_empty() || caps.len() != losses.len() {
        return Err(LosaError::InvalidArgument(format!(
            "{} losses but {} rank caps",
            losses.len(),
            caps.len()
        )));
    }
    if let Some(bad) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(LosaError::InvalidArgument(format!(
            "reconstruction losses must be finite and >= 0, got {bad}"
        )));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(LosaError::InvalidArgument(format!("rank budget {omega} must be >= 0")));
    }
    let avg = losses.iter().sum::<f64>() / losses.len() as f64;
    let degenerate = avg == 0.0;
    let r = losses
        .iter()
        .zip(caps)
        .map(|(&l, &cap)| {
            let raw = if degenerate { omega } else { l / avg * omega };
            (raw.round_ties_even() as usize).min(cap)
        })
        .collect();
    Ok(RankProfile {
        r,
        omega,
        degenerate,
    })
}
