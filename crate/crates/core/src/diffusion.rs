//! Forward diffusion of masked patches under an exponentiated linear
//! variance schedule.
//!
//! The effective per-step noise variance is `β_t^φ`, and the cumulative signal
//! retention `ᾱ_t = ∏_{i≤t} (1 − β_i^φ)` is derived from those effective
//! variances unless `alpha_bar_uses_raw_beta` is set.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid diffusion schedule: {0}")]
    Config(String),
    #[error("timestep {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("noise shape {noise:?} does not match input {input:?}")]
    NoiseShape { input: Vec<usize>, noise: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub phi: f64,
    pub alpha_bar_uses_raw_beta: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            phi: 0.8,
            alpha_bar_uses_raw_beta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    phi: f64,
    beta: Vec<f64>,
    beta_eff: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: &DiffusionConfig) -> Result<Self, DiffusionError> {
        let DiffusionConfig {
            steps,
            beta_start,
            beta_end,
            phi,
            alpha_bar_uses_raw_beta,
        } = *config;
        if steps == 0 {
            return Err(DiffusionError::Config("steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(DiffusionError::Config(format!("phi must be positive, got {phi}")));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        let beta_eff: Vec<f64> = beta.iter().map(|b| b.powf(phi)).collect();
        let retained = if alpha_bar_uses_raw_beta { &beta } else { &beta_eff };
        let alpha_bar = retained
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            phi,
            beta,
            beta_eff,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    fn index(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Step { t, steps: self.steps() });
        }
        Ok(t - 1)
    }

    /// Base variance `β_t` (1-based `t`).
    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta[self.index(t)?])
    }

    /// Effective noise variance `β_t^φ`.
    pub fn beta_eff(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.beta_eff[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn betas_eff(&self) -> &[f64] {
        &self.beta_eff
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `√ᾱ_t · x0 + √(1−ᾱ_t) · ε` with caller-supplied noise.
    pub fn diffuse_with_noise(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor, DiffusionError> {
        if noise.shape() != x0.shape() {
            return Err(DiffusionError::NoiseShape {
                input: x0.shape().to_vec(),
                noise: noise.shape().to_vec(),
            });
        }
        let ab = self.alpha_bar(t)?;
        let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, e)| signal * x + spread * e)
            .collect();
        Ok(Tensor::new(x0.shape().to_vec(), data).expect("shape copied from x0"))
    }

    /// Samples `x_t ~ N(√ᾱ_t · x0, (1−ᾱ_t) I)`, one standard normal per element.
    pub fn diffuse(&self, x0: &Tensor, t: usize, seed: u64) -> Result<Tensor, DiffusionError> {
        self.index(t)?;
        let noise = standard_normal(x0.shape(), &mut rng::rng(seed));
        self.diffuse_with_noise(x0, t, &noise)
    }
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Draws `t ~ Unif{1, …, steps}`.
pub fn sample_timestep_with(steps: usize, rng: &mut impl Rng) -> usize {
    rng.gen_range(1..=steps.max(1))
}

pub fn sample_timestep(steps: usize, seed: u64) -> usize {
    sample_timestep_with(steps, &mut rng::rng(seed))
}
