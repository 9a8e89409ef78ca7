//! Bounded fan-out for independent work items. Results come back in input
//! order and every item derives its randomness from its own index, so the
//! output does not depend on the job count.

use ltsm_diff_core::data::NormStats;
use ltsm_diff_core::evaluation::{Forecaster, Variant};
use ltsm_diff_core::sampling::{assemble_forecast, sample_member, SamplerConfig, UncertainForecast};
use ltsm_diff_core::{Error, LtsmDiff, Matrix, Result};

pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = jobs.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len()).step_by(workers).map(|i| (i, f(i, &items[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Conditional ensemble for one context, members spread over `jobs`
/// threads. Member 0 keeps its intermediates when `keep_trace` is set.
pub fn ensemble_forecast(
    model: &LtsmDiff,
    context: &Matrix,
    sampler: &SamplerConfig,
    stats: Option<&NormStats>,
    item: u64,
    jobs: usize,
    keep_trace: bool,
) -> Result<UncertainForecast> {
    sampler.validate(&model.schedule)?;
    let condition = model.encode(context)?;
    let initial = model.encoder_forecast(context)?;
    let members: Vec<u64> = (0..sampler.ensemble_size as u64).collect();
    let drawn = par_map(jobs, &members, |_, &m| sample_member(model, &condition, sampler, item, m, keep_trace && m == 0));
    let mut samples = Vec::with_capacity(drawn.len());
    let mut trace = Vec::new();
    for (m, r) in drawn.into_iter().enumerate() {
        let (y, t) = r?;
        if m == 0 {
            trace = t;
        }
        samples.push(y);
    }
    assemble_forecast(samples, trace, &initial, stats)
}

/// [`Forecaster`] over a trained model with threaded ensembles and,
/// optionally, outputs mapped back to data units.
pub struct EnsembleForecaster<'m> {
    pub model: &'m LtsmDiff,
    pub sampler: SamplerConfig,
    pub variant: Variant,
    pub jobs: usize,
    pub output_stats: Option<NormStats>,
}

impl Forecaster for EnsembleForecaster<'_> {
    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn forecast(&self, context: &Matrix, item: u64) -> Result<Matrix> {
        match self.variant {
            Variant::LtsmOnly => {
                let f = self.model.encoder_forecast(context)?;
                match &self.output_stats {
                    Some(s) => s.denormalize(&f),
                    None => Ok(f),
                }
            }
            Variant::LtsmPlusDiffusion => Ok(ensemble_forecast(
                self.model,
                context,
                &self.sampler,
                self.output_stats.as_ref(),
                item,
                self.jobs,
                false,
            )?
            .mean),
            v => Err(Error::Config(format!("variant {} is not implemented", v.label()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept_for_any_job_count() {
        let items: Vec<u64> = (0..37).collect();
        let one = par_map(1, &items, |i, &x| x * x + i as u64);
        for jobs in [2, 3, 8, 100] {
            assert_eq!(par_map(jobs, &items, |i, &x| x * x + i as u64), one);
        }
        assert!(par_map(4, &[] as &[u8], |_, _| 0).is_empty());
    }
}
