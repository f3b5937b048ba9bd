use serde::{Deserialize, Serialize};

use super::{ActionChunk, PolicyError};

/// Linear-beta noise schedule with cumulative products `alpha_bar[k]`,
/// indexed `0..=K` where `alpha_bar[0] = 1` reproduces the clean chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 20,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, PolicyError> {
        if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(PolicyError::InvalidSchedule(format!(
                "need K >= 1 and 0 < beta_start <= beta_end < 1, got K={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bar,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self, PolicyError> {
        Self::new(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    /// Beta of step `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// Cumulative product at step `k` in `0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    fn check_step(&self, k: usize) -> Result<(), PolicyError> {
        if k == 0 || k > self.steps() {
            return Err(PolicyError::StepOutOfRange { k, steps: self.steps() });
        }
        Ok(())
    }

    /// `a_k = sqrt(alpha_bar_k) a_0 + sqrt(1 - alpha_bar_k) eps`.
    pub fn forward_diffuse(&self, clean: &ActionChunk, k: usize, noise: &[f64]) -> Result<ActionChunk, PolicyError> {
        self.check_step(k)?;
        Ok(diffuse_with(clean, self.alpha_bar(k), noise)?)
    }
}

/// Noising with an explicit cumulative coefficient.
pub fn diffuse_with(clean: &ActionChunk, alpha_bar: f64, noise: &[f64]) -> Result<ActionChunk, PolicyError> {
    if noise.len() != clean.values().len() {
        return Err(PolicyError::Shape(format!(
            "noise has {} values, chunk has {}",
            noise.len(),
            clean.values().len()
        )));
    }
    let signal = alpha_bar.sqrt();
    let spread = (1.0 - alpha_bar).sqrt();
    let values = clean
        .values()
        .iter()
        .zip(noise)
        .map(|(a, e)| signal * a + spread * e)
        .collect();
    ActionChunk::new(clean.horizon(), clean.dof(), values)
}
