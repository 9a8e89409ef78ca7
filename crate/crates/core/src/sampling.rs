//! Reverse-process samplers, ensembles, and denoising traces.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::diffusion::{recover_clean, NoiseSchedule};
use crate::error::{config_err, Error, Result};
use crate::model::LtsmDiff;
use crate::params::standard_normal;
use crate::tensor::Matrix;

/// Anything that predicts the target noise `ε̂_y` at step `t`.
pub trait TargetDenoiser {
    fn predict(&self, y_t: &Matrix, t: usize) -> Result<Matrix>;
}

impl<F> TargetDenoiser for F
where
    F: Fn(&Matrix, usize) -> Result<Matrix>,
{
    fn predict(&self, y_t: &Matrix, t: usize) -> Result<Matrix> {
        self(y_t, t)
    }
}

/// The trained denoiser with a fixed clean condition (`t_x = 0`).
pub struct Conditioned<'m> {
    pub model: &'m LtsmDiff,
    pub condition: Matrix,
}

impl TargetDenoiser for Conditioned<'_> {
    fn predict(&self, y_t: &Matrix, t: usize) -> Result<Matrix> {
        self.model.conditional_noise(y_t, &self.condition, t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Reverse steps for DDIM; `None` uses all `N`. DDPM always runs `N`.
    pub steps: Option<usize>,
    pub eta: f64,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Keep every `trace_every`-th intermediate (the final one is always kept).
    pub trace_every: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Ddpm, steps: None, eta: 0.0, ensemble_size: 20, seed: 0, trace_every: 1 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(config_err("ensemble_size must be at least 1"));
        }
        if self.trace_every == 0 {
            return Err(config_err("trace_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(config_err(format!("eta {} outside [0, 1]", self.eta)));
        }
        if let Some(s) = self.steps {
            if s == 0 || s > schedule.steps() {
                return Err(config_err(format!("sampler steps {s} outside 1..={}", schedule.steps())));
            }
        }
        Ok(())
    }

    /// Independent RNG for ensemble member `member` of forecast `item`.
    pub fn member_rng(&self, item: u64, member: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(member);
        rng
    }
}

/// Collects intermediates during a reverse pass.
struct Recorder<'a> {
    out: Option<&'a mut Vec<Matrix>>,
    every: usize,
    total: usize,
}

impl Recorder<'_> {
    fn record(&mut self, k: usize, y: &Matrix) {
        if let Some(out) = self.out.as_deref_mut() {
            if k.is_multiple_of(self.every) || k == self.total {
                out.push(y.clone());
            }
        }
    }
}

/// Number of intermediates a trace keeps for `total` reverse steps.
pub fn retained_steps(total: usize, every: usize) -> usize {
    total / every + usize::from(!total.is_multiple_of(every))
}

fn check_finite(y: &Matrix, t: usize) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("reverse step at t={t}")))
    }
}

/// Ancestral DDPM sampling from the given `y_N`:
/// `y_{t-1} = (y_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t + σ_t z`,
/// `σ_t² = β_t (1−ᾱ_{t−1}) / (1−ᾱ_t)`, no noise at `t = 1`.
pub fn ddpm_sample_from<D: TargetDenoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    y_start: Matrix,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<Matrix>>,
    trace_every: usize,
) -> Result<Matrix> {
    let n = schedule.steps();
    let mut rec = Recorder { out: trace, every: trace_every.max(1), total: n };
    let mut y = y_start;
    for (k, t) in (1..=n).rev().enumerate() {
        let eps = denoiser.predict(&y, t)?;
        let beta = schedule.beta(t);
        let coef = beta / libm::sqrt(1.0 - schedule.alpha_bar(t));
        let inv_sqrt_alpha = 1.0 / libm::sqrt(schedule.alpha(t));
        let mut next = y.zip_map(&eps, |yv, e| (yv - coef * e) * inv_sqrt_alpha)?;
        if t > 1 {
            let var = beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t));
            let z = standard_normal(y.rows(), y.cols(), rng);
            next.axpy(libm::sqrt(var), &z)?;
        }
        check_finite(&next, t)?;
        y = next;
        rec.record(k + 1, &y);
    }
    Ok(y)
}

pub fn ddpm_sample<D: TargetDenoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<Matrix>>,
    trace_every: usize,
) -> Result<Matrix> {
    let start = standard_normal(shape.0, shape.1, rng);
    ddpm_sample_from(denoiser, schedule, start, rng, trace, trace_every)
}

/// Descending timestep grid `t_S > … > t_1` with `t_k = ⌊k·N/S⌋`.
pub fn ddim_grid(n: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|k| k * n / steps).collect()
}

/// DDIM sampling from the given `y_N` over a uniform `steps`-point grid.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_from<D: TargetDenoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    y_start: Matrix,
    steps: usize,
    eta: f64,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<Matrix>>,
    trace_every: usize,
) -> Result<Matrix> {
    let n = schedule.steps();
    if steps == 0 || steps > n {
        return Err(config_err(format!("ddim steps {steps} outside 1..={n}")));
    }
    let grid = ddim_grid(n, steps);
    let mut rec = Recorder { out: trace, every: trace_every.max(1), total: steps };
    let mut y = y_start;
    for (k, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(k + 1).copied().unwrap_or(0);
        let eps = denoiser.predict(&y, t)?;
        let y0 = recover_clean(&y, t, &eps, schedule)?;
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let sigma = eta * libm::sqrt((1.0 - ab_prev) / (1.0 - ab)) * libm::sqrt(1.0 - ab / ab_prev);
        let dir = libm::sqrt((1.0 - ab_prev - sigma * sigma).max(0.0));
        let sa = libm::sqrt(ab_prev);
        let mut next = y0.zip_map(&eps, |a, e| sa * a + dir * e)?;
        if sigma > 0.0 {
            let z = standard_normal(y.rows(), y.cols(), rng);
            next.axpy(sigma, &z)?;
        }
        check_finite(&next, t)?;
        y = next;
        rec.record(k + 1, &y);
    }
    Ok(y)
}

pub fn ddim_sample<D: TargetDenoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    steps: usize,
    eta: f64,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<Matrix>>,
    trace_every: usize,
) -> Result<Matrix> {
    let start = standard_normal(shape.0, shape.1, rng);
    ddim_sample_from(denoiser, schedule, start, steps, eta, rng, trace, trace_every)
}

/// Runs the configured sampler once.
pub fn sample_once<D: TargetDenoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<Matrix>>,
) -> Result<Matrix> {
    match config.kind {
        SamplerKind::Ddpm => ddpm_sample(denoiser, schedule, shape, rng, trace, config.trace_every),
        SamplerKind::Ddim => {
            let steps = config.steps.unwrap_or(schedule.steps());
            ddim_sample(denoiser, schedule, shape, steps, config.eta, rng, trace, config.trace_every)
        }
    }
}

/// Intermediates of one reverse pass plus ensemble band statistics, all in
/// data units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub intermediates: Vec<Matrix>,
    pub initial_ltsm_forecast: Matrix,
    pub band_low: Matrix,
    pub band_high: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertainForecast {
    pub mean: Matrix,
    pub samples: Vec<Matrix>,
    pub trace: DenoiseTrace,
}

/// Linear-interpolation quantile (`q ∈ [0, 1]`) of each element across
/// `samples`.
pub fn elementwise_quantile(samples: &[Matrix], q: f64) -> Result<Matrix> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let (r, c) = first.shape();
    let mut out = Matrix::zeros(r, c);
    let mut buf = Vec::with_capacity(samples.len());
    for i in 0..r * c {
        buf.clear();
        for s in samples {
            if s.shape() != (r, c) {
                return Err(Error::Shape("ensemble members differ in shape".into()));
            }
            buf.push(s.as_slice()[i]);
        }
        buf.sort_by(f64::total_cmp);
        let pos = q * (buf.len() - 1) as f64;
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(buf.len() - 1);
        let frac = pos - lo as f64;
        out.as_mut_slice()[i] = buf[lo] + (buf[hi] - buf[lo]) * frac;
    }
    Ok(out)
}

pub fn elementwise_mean(samples: &[Matrix]) -> Result<Matrix> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for s in samples {
        acc.add_assign(s)?;
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Draws ensemble member `member` for forecast `item`, returning the sample
/// and, if requested, its intermediates (normalized units).
pub fn sample_member(
    model: &LtsmDiff,
    condition: &Matrix,
    config: &SamplerConfig,
    item: u64,
    member: u64,
    keep_trace: bool,
) -> Result<(Matrix, Vec<Matrix>)> {
    let den = Conditioned { model, condition: condition.clone() };
    let mut rng = config.member_rng(item, member);
    let mut trace = Vec::new();
    let shape = (model.horizon(), model.channels());
    let y = sample_once(&den, &model.schedule, shape, config, &mut rng, keep_trace.then_some(&mut trace))?;
    Ok((y, trace))
}

/// Combines already drawn members (normalized units) into a forecast in
/// data units. `trace` holds member 0's intermediates.
pub fn assemble_forecast(
    samples: Vec<Matrix>,
    trace: Vec<Matrix>,
    initial_forecast: &Matrix,
    stats: Option<&NormStats>,
) -> Result<UncertainForecast> {
    let to_data = |m: &Matrix| -> Result<Matrix> {
        match stats {
            Some(s) => s.denormalize(m),
            None => Ok(m.clone()),
        }
    };
    let samples: Vec<Matrix> = samples.iter().map(to_data).collect::<Result<_>>()?;
    let mean = elementwise_mean(&samples)?;
    let band_low = elementwise_quantile(&samples, 0.05)?;
    let band_high = elementwise_quantile(&samples, 0.95)?;
    let intermediates = trace.iter().map(to_data).collect::<Result<_>>()?;
    Ok(UncertainForecast {
        mean,
        trace: DenoiseTrace { intermediates, initial_ltsm_forecast: to_data(initial_forecast)?, band_low, band_high },
        samples,
    })
}

/// Encodes the (normalized) context once, draws `ensemble_size` conditional
/// samples with a clean condition, and summarizes them.
pub fn forecast_with_uncertainty(
    model: &LtsmDiff,
    context: &Matrix,
    config: &SamplerConfig,
    stats: Option<&NormStats>,
    item: u64,
) -> Result<UncertainForecast> {
    config.validate(&model.schedule)?;
    let condition = model.encode(context)?;
    let initial = model.encoder_forecast(context)?;
    let mut samples = Vec::with_capacity(config.ensemble_size);
    let mut trace = Vec::new();
    for m in 0..config.ensemble_size {
        let (y, t) = sample_member(model, &condition, config, item, m as u64, m == 0)?;
        if m == 0 {
            trace = t;
        }
        samples.push(y);
    }
    assemble_forecast(samples, trace, &initial, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_noise;
    use core::cell::Cell;

    fn schedule(n: usize) -> NoiseSchedule {
        NoiseSchedule::linear(n, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn ddpm_single_step_matches_hand_formula() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.3]).unwrap();
        let eps_hat = Matrix::from_rows(&[[0.5, -1.0]]);
        let stub = |_: &Matrix, _: usize| Ok(eps_hat.clone());
        let y1 = Matrix::from_rows(&[[1.0, 2.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y0 = ddpm_sample_from(&stub, &s, y1.clone(), &mut rng, None, 1).unwrap();
        // ᾱ_1 = α_1 = 0.7
        let expect = Matrix::from_fn(1, 2, |_, c| (y1.get(0, c) - 0.3 / 0.3f64.sqrt() * eps_hat.get(0, c)) / 0.7f64.sqrt());
        assert!(y0.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn ddpm_one_step_inverts_true_noise() {
        let s = NoiseSchedule::from_betas(alloc::vec![0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = standard_normal(3, 2, &mut rng);
        let eps = standard_normal(3, 2, &mut rng);
        let y1 = forward_noise(&y0, 1, &eps, &s).unwrap();
        let stub = |_: &Matrix, _: usize| Ok(eps.clone());
        let back = ddpm_sample_from(&stub, &s, y1, &mut rng, None, 1).unwrap();
        assert!(back.max_abs_diff(&y0) < 1e-6);
    }

    #[test]
    fn ddim_deterministic_reconstruction() {
        let s = schedule(50);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y0 = standard_normal(4, 2, &mut rng);
        let eps = standard_normal(4, 2, &mut rng);
        let start = forward_noise(&y0, 50, &eps, &s).unwrap();
        let stub = |_: &Matrix, _: usize| Ok(eps.clone());
        let out = ddim_sample_from(&stub, &s, start.clone(), 50, 0.0, &mut rng, None, 1).unwrap();
        assert!(out.max_abs_diff(&y0) < 1e-6);
        let out10 = ddim_sample_from(&stub, &s, start, 10, 0.0, &mut rng, None, 1).unwrap();
        assert!(out10.max_abs_diff(&y0) < 1e-6);
    }

    #[test]
    fn ddim_call_count_follows_grid() {
        let s = schedule(50);
        let calls = Cell::new(0usize);
        let seen = core::cell::RefCell::new(Vec::new());
        let stub = |y: &Matrix, t: usize| {
            calls.set(calls.get() + 1);
            seen.borrow_mut().push(t);
            Ok(Matrix::zeros(y.rows(), y.cols()))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ddim_sample(&stub, &s, (2, 2), 10, 0.0, &mut rng, None, 1).unwrap();
        assert_eq!(calls.get(), 10);
        assert_eq!(*seen.borrow(), [50, 45, 40, 35, 30, 25, 20, 15, 10, 5]);
        assert_eq!(ddim_grid(10, 3), [10, 6, 3]);
    }

    #[test]
    fn seeded_samplers_are_bitwise_reproducible() {
        let s = schedule(20);
        let stub = |y: &Matrix, t: usize| Ok(y.scale(0.1 * t as f64 / 20.0));
        let run = |kind| {
            let cfg = SamplerConfig { kind, eta: if kind == SamplerKind::Ddim { 0.0 } else { 1.0 }, ..Default::default() };
            let mut rng = cfg.member_rng(0, 0);
            sample_once(&stub, &s, (3, 2), &cfg, &mut rng, None).unwrap()
        };
        for kind in [SamplerKind::Ddpm, SamplerKind::Ddim] {
            let (a, b) = (run(kind), run(kind));
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn nan_is_reported_with_step() {
        let s = schedule(5);
        let stub = |y: &Matrix, t: usize| Ok(if t == 3 { Matrix::filled(y.rows(), y.cols(), f64::NAN) } else { y.clone() });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = ddpm_sample(&stub, &s, (1, 1), &mut rng, None, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(m) if m.contains("t=3")));
    }

    #[test]
    fn trace_lengths() {
        let s = schedule(10);
        let stub = |y: &Matrix, _: usize| Ok(y.scale(0.5));
        for every in [1, 3, 10] {
            let mut trace = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let y = ddpm_sample(&stub, &s, (2, 1), &mut rng, Some(&mut trace), every).unwrap();
            assert_eq!(trace.len(), retained_steps(10, every));
            assert_eq!(trace.last().unwrap(), &y);
        }
        assert_eq!(retained_steps(10, 3), 4);
    }

    #[test]
    fn quantiles() {
        let samples: Vec<Matrix> = (0..21).map(|i| Matrix::scalar(i as f64)).collect();
        assert_eq!(elementwise_quantile(&samples, 0.05).unwrap().as_slice(), &[1.0]);
        assert_eq!(elementwise_quantile(&samples, 0.95).unwrap().as_slice(), &[19.0]);
        assert_eq!(elementwise_mean(&samples).unwrap().as_slice(), &[10.0]);
        let one = [Matrix::scalar(3.0)];
        assert_eq!(elementwise_quantile(&one, 0.05).unwrap(), elementwise_quantile(&one, 0.95).unwrap());
    }

    #[test]
    fn sampler_config_validation() {
        let s = schedule(10);
        assert!(SamplerConfig { ensemble_size: 0, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { steps: Some(11), ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { eta: 1.5, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig::default().validate(&s).is_ok());
    }
}
