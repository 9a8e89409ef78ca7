//! Noise schedule, dual-timestep forward noising, and the noise-matching and
//! joint objectives.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss_reduction: LossReduction,
    /// Treat the encoder representation as fixed conditioning in the
    /// noise-matching term (no gradient back into the encoder through it).
    pub detach_condition: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            loss_reduction: LossReduction::Mean,
            detach_condition: false,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear β schedule with cumulative products; index `t` runs over `0..=N`
/// and `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("diffusion needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err(format!(
                "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
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
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(config_err("every beta must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `N`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=N`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t` for `t ∈ 0..=N`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(√ᾱ_t, √(1-ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (libm::sqrt(ab), libm::sqrt(1.0 - ab))
    }
}

/// `√ᾱ_t · z0 + √(1-ᾱ_t) · eps`
pub fn forward_noise(z0: &Matrix, t: usize, eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    schedule.check_step(t)?;
    if t == 0 {
        if z0.shape() != eps.shape() {
            return Err(Error::Shape(format!("noise {:?} for data {:?}", eps.shape(), z0.shape())));
        }
        return Ok(z0.clone());
    }
    let (s, n) = schedule.coefficients(t);
    z0.zip_map(eps, |z, e| s * z + n * e)
}

/// Inverse of [`forward_noise`]: `(z_t - √(1-ᾱ_t) · eps) / √ᾱ_t`.
pub fn recover_clean(z_t: &Matrix, t: usize, eps: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    if ab <= 1e-12 {
        return Err(Error::Degenerate(format!("alpha_bar at step {t} is {ab:e}")));
    }
    let (s, n) = schedule.coefficients(t);
    z_t.zip_map(eps, |z, e| (z - n * e) / s)
}

/// Forward noising on the tape, for a differentiable `z0`.
pub fn forward_noise_var(tape: &mut Tape, z0: Var, t: usize, eps: &Matrix, schedule: &NoiseSchedule) -> Result<Var> {
    schedule.check_step(t)?;
    if tape.value(z0).shape() != eps.shape() {
        return Err(Error::Shape(format!("noise {:?} for data {:?}", eps.shape(), tape.value(z0).shape())));
    }
    if t == 0 {
        return Ok(z0);
    }
    let (s, n) = schedule.coefficients(t);
    let signal = tape.scale(z0, s);
    let noise = tape.constant(eps.scale(n));
    tape.add(signal, noise)
}

/// Timesteps for the condition (`t_x`) and the target (`t_y`). `t_x = 0`
/// is a clean condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualTimestep {
    pub t_x: usize,
    pub t_y: usize,
}

/// Independent uniform draws from `{0, …, N}` for both modalities.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> DualTimestep {
    DualTimestep { t_x: rng.random_range(0..=steps), t_y: rng.random_range(0..=steps) }
}

fn squared_error(target: &Matrix, pred: &Matrix, reduction: LossReduction) -> Result<f64> {
    let s = target.sub(pred)?.sum_squares();
    Ok(match reduction {
        LossReduction::Mean => s / target.len().max(1) as f64,
        LossReduction::Sum => s,
    })
}

/// One example's noise-matching loss
/// `‖ε_x − ε̂_x‖² + ‖ε_y − ε̂_y‖²`, each term reduced per `reduction`.
pub fn diffusion_loss(
    eps_x: &Matrix,
    eps_y: &Matrix,
    eps_x_hat: &Matrix,
    eps_y_hat: &Matrix,
    reduction: LossReduction,
) -> Result<f64> {
    Ok(squared_error(eps_x, eps_x_hat, reduction)? + squared_error(eps_y, eps_y_hat, reduction)?)
}

/// Batch mean of [`diffusion_loss`] over `(ε_x, ε_y, ε̂_x, ε̂_y)` tuples.
pub fn batch_diffusion_loss(items: &[(&Matrix, &Matrix, &Matrix, &Matrix)], reduction: LossReduction) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for (ex, ey, px, py) in items {
        total += diffusion_loss(ex, ey, px, py, reduction)?;
    }
    Ok(total / items.len() as f64)
}

/// Tape version of one squared-error term.
pub fn noise_matching_term(tape: &mut Tape, target: &Matrix, pred: Var, reduction: LossReduction) -> Result<Var> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let s = tape.sum_squares(diff);
    Ok(match reduction {
        LossReduction::Mean => tape.scale(s, 1.0 / target.len().max(1) as f64),
        LossReduction::Sum => s,
    })
}

/// `L_llm + λ · L_diff`; exactly `L_llm` when `λ = 0`.
pub fn total_loss(l_llm: f64, l_diff: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        l_llm
    } else {
        l_llm + lambda * l_diff
    }
}
