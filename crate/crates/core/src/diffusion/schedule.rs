use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-β DDPM schedule. Step `t` runs over `1..=T`; `alpha_bar(0)` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { params: ScheduleParams { steps, beta_min, beta_max }, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_min, p.beta_max)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `√ᾱ · x0 + √(1−ᾱ) · eps` for an explicit `ᾱ`.
pub fn diffuse_with_alpha_bar(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("step {t} outside [1, {}]", schedule.steps())));
    }
    diffuse_with_alpha_bar(x0, eps, schedule.alpha_bar(t))
}
