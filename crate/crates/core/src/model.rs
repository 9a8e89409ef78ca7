//! The full forecaster: encoder, optional denoiser, and noise schedule over
//! one shared parameter store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::WindowPair;
use crate::diffusion::{forward_noise_var, noise_matching_term, sample_timesteps, DiffusionConfig, DualTimestep, NoiseSchedule};
use crate::encoder::{encoder_loss_var, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::{standard_normal, ParamGroup, ParamStore};
use crate::tensor::Matrix;
use crate::uvit::{Uvit, UvitConfig, UvitOptions, UvitShape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: UvitConfig,
    pub diffusion: DiffusionConfig,
    /// `false` builds the encoder-only variant; no denoiser is constructed.
    pub use_diffusion: bool,
    /// Seed for every trainable tensor.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            denoiser: UvitConfig::default(),
            diffusion: DiffusionConfig::default(),
            use_diffusion: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.diffusion.schedule()?;
        if self.use_diffusion {
            self.denoiser.validate()?;
        }
        Ok(())
    }

    pub fn uvit_shape(&self) -> UvitShape {
        UvitShape {
            cond_tokens: self.encoder.lookback,
            cond_dim: self.encoder.width,
            target_tokens: self.encoder.horizon,
            target_dim: self.encoder.channels,
            max_timestep: self.diffusion.steps,
        }
    }
}

/// Noise draws for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw {
    pub timesteps: DualTimestep,
    pub eps_x: Matrix,
    pub eps_y: Matrix,
}

/// Loss nodes of one batch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub llm: Var,
    pub diff: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct LtsmDiff {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub denoiser: Option<Uvit>,
    pub schedule: NoiseSchedule,
}

impl LtsmDiff {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::build(&mut store, config.encoder, &mut rng)?;
        let denoiser = if config.use_diffusion {
            Some(Uvit::build(&mut store, config.denoiser, config.uvit_shape(), &mut rng)?)
        } else {
            None
        };
        let schedule = config.diffusion.schedule()?;
        Ok(Self { config, store, encoder, denoiser, schedule })
    }

    pub fn lookback(&self) -> usize {
        self.config.encoder.lookback
    }

    pub fn horizon(&self) -> usize {
        self.config.encoder.horizon
    }

    pub fn channels(&self) -> usize {
        self.config.encoder.channels
    }

    pub fn has_denoiser(&self) -> bool {
        self.denoiser.is_some()
    }

    fn denoiser(&self) -> Result<&Uvit> {
        self.denoiser
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a denoiser".into()))
    }

    /// Draws `(t_x, t_y, ε_x, ε_y)` for one example.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DiffusionDraw {
        let timesteps = sample_timesteps(rng, self.schedule.steps());
        let eps_x = standard_normal(self.lookback(), self.config.encoder.width, rng);
        let eps_y = standard_normal(self.horizon(), self.channels(), rng);
        DiffusionDraw { timesteps, eps_x, eps_y }
    }

    /// Builds the batch objective `L_llm + λ · L_diff` on `tape`, each term
    /// averaged over the batch. `draws` must hold one entry per window when
    /// the model has a denoiser and `with_diffusion` is set.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        windows: &[&WindowPair],
        draws: &[DiffusionDraw],
        lambda: f64,
        with_diffusion: bool,
        mode: &mut Mode<'_>,
    ) -> Result<BatchLoss> {
        if windows.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let use_diff = with_diffusion && self.denoiser.is_some();
        if use_diff && draws.len() != windows.len() {
            return Err(Error::InvalidArgument(format!("{} draws for {} windows", draws.len(), windows.len())));
        }
        let channel_mean = self.config.encoder.channel_mean;
        let reduction = self.config.diffusion.loss_reduction;
        let mut llm_terms = Vec::with_capacity(windows.len());
        let mut diff_terms = Vec::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            if w.horizon() != self.horizon() {
                return Err(Error::Shape(format!("target horizon {} vs model {}", w.horizon(), self.horizon())));
            }
            let x = tape.constant(w.context.clone());
            let repr = self.encoder.encode(tape, &self.store, x, mode)?;
            let pred = self.encoder.head_forward(tape, &self.store, repr)?;
            llm_terms.push(encoder_loss_var(tape, pred, &w.target, channel_mean)?);

            if use_diff {
                let d = &draws[i];
                let uvit = self.denoiser()?;
                let cond = if self.config.diffusion.detach_condition { tape.detach(repr) } else { repr };
                let x_t = forward_noise_var(tape, cond, d.timesteps.t_x, &d.eps_x, &self.schedule)?;
                let y0 = tape.constant(w.target.clone());
                let y_t = forward_noise_var(tape, y0, d.timesteps.t_y, &d.eps_y, &self.schedule)?;
                let (ex, ey) = uvit.predict(tape, &self.store, x_t, y_t, d.timesteps.t_x, d.timesteps.t_y, UvitOptions::default())?;
                let lx = noise_matching_term(tape, &d.eps_x, ex, reduction)?;
                let ly = noise_matching_term(tape, &d.eps_y, ey, reduction)?;
                diff_terms.push(tape.add(lx, ly)?);
            }
        }
        let inv = 1.0 / windows.len() as f64;
        let llm = mean_of(tape, &llm_terms, inv)?;
        let diff = if diff_terms.is_empty() { None } else { Some(mean_of(tape, &diff_terms, inv)?) };
        let total = match diff {
            Some(d) if lambda != 0.0 => {
                let scaled = tape.scale(d, lambda);
                tape.add(llm, scaled)?
            }
            _ => llm,
        };
        Ok(BatchLoss { llm, diff, total })
    }

    /// Eval-mode hidden states `x₀` (`T × m`).
    pub fn encode(&self, context: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.constant(context.clone());
        let r = self.encoder.encode(&mut tape, &self.store, x, &mut Mode::Eval)?;
        Ok(tape.value(r).clone())
    }

    /// Eval-mode direct forecast of the encoder head (`H × d`).
    pub fn encoder_forecast(&self, context: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = tape.constant(context.clone());
        let r = self.encoder.forecast(&mut tape, &self.store, x, &mut Mode::Eval)?;
        Ok(tape.value(r).clone())
    }

    pub fn predict_noise(&self, x_noisy: &Matrix, y_noisy: &Matrix, t_x: usize, t_y: usize) -> Result<(Matrix, Matrix)> {
        self.denoiser()?.predict_noise(&self.store, x_noisy, y_noisy, t_x, t_y)
    }

    pub fn conditional_noise(&self, y_noisy: &Matrix, x_clean: &Matrix, t_y: usize) -> Result<Matrix> {
        self.denoiser()?.conditional_noise(&self.store, y_noisy, x_clean, t_y)
    }

    /// Snapshot of every tensor, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Matrix> {
        self.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Builds a model for `config` and copies over every tensor whose name
    /// and shape match in `self`. Used when the channel count changes between
    /// source and target data: only the `d`-shaped projections start fresh.
    pub fn rebuild_for(&self, config: ModelConfig) -> Result<(Self, Vec<String>)> {
        let mut next = Self::new(config)?;
        let mut fresh = Vec::new();
        for id in next.store.ids().collect::<Vec<_>>() {
            let name = next.store.entry(id).name.clone();
            match self.store.lookup(&name) {
                Some(src) if self.store.value(src).shape() == next.store.value(id).shape() => {
                    next.store.assign(id, self.store.value(src).clone())?;
                }
                _ => fresh.push(name),
            }
        }
        Ok((next, fresh))
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.store.count_where(|e| e.group == group)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var], inv: f64) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(if terms.len() == 1 { acc } else { tape.scale(acc, inv) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: 2,
                width: 8,
                n_heads: 2,
                dropout_p: 0.0,
                n_blocks: 1,
                lora: LoraConfig { rank: 2, alpha: 4.0, dropout_p: 0.0 },
                max_context: 8,
                lookback: 4,
                horizon: 2,
                ..Default::default()
            },
            denoiser: UvitConfig { depth: 2, width: 8, n_heads: 2, time_embed_dim: 4 },
            diffusion: DiffusionConfig { steps: 10, ..Default::default() },
            use_diffusion: true,
            seed: 3,
        }
    }

    fn window(seed: u64) -> WindowPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowPair { start: 0, context: standard_normal(4, 2, &mut rng), target: standard_normal(2, 2, &mut rng) }
    }

    #[test]
    fn lambda_zero_total_is_llm() {
        let model = LtsmDiff::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [window(1), window(2)];
        let refs: Vec<&WindowPair> = w.iter().collect();
        let draws: Vec<_> = refs.iter().map(|_| model.draw(&mut rng)).collect();
        let mut tape = Tape::new();
        let l = model.batch_loss(&mut tape, &refs, &draws, 0.0, true, &mut Mode::Eval).unwrap();
        assert_eq!(tape.scalar_value(l.total), tape.scalar_value(l.llm));
        assert!(l.diff.is_some());
        let mut tape = Tape::new();
        let l = model.batch_loss(&mut tape, &refs, &draws, 2.5, true, &mut Mode::Eval).unwrap();
        let expect = tape.scalar_value(l.llm) + 2.5 * tape.scalar_value(l.diff.unwrap());
        assert!((tape.scalar_value(l.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn encoder_only_variant_has_no_denoiser() {
        let model = LtsmDiff::new(ModelConfig { use_diffusion: false, ..tiny_config() }).unwrap();
        assert!(!model.has_denoiser());
        assert_eq!(model.group_count(ParamGroup::Denoiser), 0);
        assert!(model.predict_noise(&Matrix::zeros(4, 8), &Matrix::zeros(2, 2), 0, 0).is_err());
    }

    #[test]
    fn rebuild_keeps_matching_tensors() {
        let model = LtsmDiff::new(tiny_config()).unwrap();
        let mut cfg = tiny_config();
        cfg.encoder.channels = 3;
        let (next, fresh) = model.rebuild_for(cfg).unwrap();
        let mut fresh_sorted = fresh.clone();
        fresh_sorted.sort();
        assert_eq!(
            fresh_sorted,
            ["embedding.input.weight", "head.bias", "head.weight", "uvit.y_in.weight", "uvit.y_out.bias", "uvit.y_out.weight"]
        );
        let id = next.store.lookup("block0.q.weight").unwrap();
        assert_eq!(next.store.value(id), model.store.value(model.store.lookup("block0.q.weight").unwrap()));
    }
}
