//! Transformer noise predictor with long skip connections.
//!
//! Token layout: `[time(t_x), time(t_y), x_1 … x_T, y_1 … y_H]`. Condition
//! rows are projected from width `m`, target rows from `d` channels, and each
//! group gets its own learned modality vector on top of a learned position
//! table. Attention is bidirectional. With `depth` blocks numbered `1..=depth`
//! and `h_0` the embedded tokens, block `i > depth/2` consumes
//! `fuse_i([h_{i-1} | h_{depth-i}])`.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::{sinusoidal, BlockSpec, Builder, LayerNorm, Linear, Mode, TransformerBlock, INIT_STD};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UvitConfig {
    pub depth: usize,
    pub width: usize,
    pub n_heads: usize,
    pub time_embed_dim: usize,
}

impl Default for UvitConfig {
    fn default() -> Self {
        Self { depth: 8, width: 256, n_heads: 4, time_embed_dim: 64 }
    }
}

impl UvitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return Err(config_err(format!("denoiser depth must be even and positive, got {}", self.depth)));
        }
        if self.n_heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.n_heads) {
            return Err(config_err(format!("denoiser width {} not divisible by {} heads", self.width, self.n_heads)));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(config_err("time_embed_dim must be even and at least 2"));
        }
        Ok(())
    }
}

/// Token counts and feature sizes the denoiser is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UvitShape {
    /// `T`
    pub cond_tokens: usize,
    /// `m`
    pub cond_dim: usize,
    /// `H`
    pub target_tokens: usize,
    /// `d`
    pub target_dim: usize,
    /// `N`
    pub max_timestep: usize,
}

/// Test hooks for [`Uvit::predict`].
#[derive(Clone, Copy, Debug, Default)]
pub struct UvitOptions {
    /// Zero the output of the middle block so only skip paths carry signal.
    pub zero_deep_path: bool,
}

#[derive(Clone, Debug)]
pub struct Uvit {
    pub config: UvitConfig,
    pub shape: UvitShape,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub x_in: Linear,
    pub y_in: Linear,
    pub x_modality: ParamId,
    pub y_modality: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// Fusion layers for blocks `depth/2 + 1 ..= depth`, in order.
    pub skip_fuse: Vec<Linear>,
    pub norm: LayerNorm,
    pub x_out: Linear,
    pub y_out: Linear,
}

impl Uvit {
    /// Registers every tensor under `uvit.*`.
    pub fn build(store: &mut ParamStore, config: UvitConfig, shape: UvitShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let tokens = 2 + shape.cond_tokens + shape.target_tokens;
        let mut b = Builder::new(store, rng, ParamGroup::Denoiser, ParamKind::Trainable, "uvit");
        let time_fc1 = b.linear("time.fc1", config.time_embed_dim, w, INIT_STD)?;
        let time_fc2 = b.linear("time.fc2", w, w, INIT_STD)?;
        let x_in = b.linear("x_in", shape.cond_dim, w, INIT_STD)?;
        let y_in = b.linear("y_in", shape.target_dim, w, INIT_STD)?;
        let x_modality = b.gaussian("x_modality", 1, w, INIT_STD)?;
        let y_modality = b.gaussian("y_modality", 1, w, INIT_STD)?;
        let position = b.gaussian("position", tokens, w, INIT_STD)?;
        let spec = BlockSpec { width: w, n_heads: config.n_heads, causal: false, dropout_p: 0.0, adapters: None };
        let mut blocks = Vec::with_capacity(config.depth);
        let mut skip_fuse = Vec::with_capacity(config.depth / 2);
        for i in 1..=config.depth {
            if i > config.depth / 2 {
                skip_fuse.push(b.linear(&format!("skip{i}"), 2 * w, w, INIT_STD)?);
            }
            blocks.push(TransformerBlock::build(&mut b.scoped(&format!("block{i}")), spec, config.depth)?);
        }
        let norm = b.layer_norm("norm", w)?;
        let x_out = b.linear("x_out", w, shape.cond_dim, INIT_STD)?;
        let y_out = b.linear("y_out", w, shape.target_dim, INIT_STD)?;
        Ok(Self {
            config,
            shape,
            time_fc1,
            time_fc2,
            x_in,
            y_in,
            x_modality,
            y_modality,
            position,
            blocks,
            skip_fuse,
            norm,
            x_out,
            y_out,
        })
    }

    fn time_token(&self, tape: &mut Tape, store: &ParamStore, t: usize) -> Result<Var> {
        let feats = tape.constant(sinusoidal(t as f64, self.config.time_embed_dim));
        let h = self.time_fc1.forward(tape, store, feats)?;
        let h = tape.silu(h);
        self.time_fc2.forward(tape, store, h)
    }

    /// `(ε̂_x, ε̂_y)` for noisy condition tokens (`T × m`) and noisy target
    /// (`H × d`) at timesteps `(t_x, t_y)`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_noisy: Var,
        y_noisy: Var,
        t_x: usize,
        t_y: usize,
        opts: UvitOptions,
    ) -> Result<(Var, Var)> {
        let s = self.shape;
        if tape.value(x_noisy).shape() != (s.cond_tokens, s.cond_dim) {
            return Err(Error::Shape(format!(
                "condition {:?}, denoiser expects {:?}",
                tape.value(x_noisy).shape(),
                (s.cond_tokens, s.cond_dim)
            )));
        }
        if tape.value(y_noisy).shape() != (s.target_tokens, s.target_dim) {
            return Err(Error::Shape(format!(
                "target {:?}, denoiser expects {:?}",
                tape.value(y_noisy).shape(),
                (s.target_tokens, s.target_dim)
            )));
        }
        for t in [t_x, t_y] {
            if t > s.max_timestep {
                return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", s.max_timestep)));
            }
        }

        let tx = self.time_token(tape, store, t_x)?;
        let ty = self.time_token(tape, store, t_y)?;
        let xm = tape.param(store, self.x_modality);
        let ym = tape.param(store, self.y_modality);
        let xh = self.x_in.forward(tape, store, x_noisy)?;
        let xh = tape.add_row(xh, xm)?;
        let yh = self.y_in.forward(tape, store, y_noisy)?;
        let yh = tape.add_row(yh, ym)?;
        let tokens = tape.concat_rows(&[tx, ty, xh, yh])?;
        let pos = tape.param(store, self.position);
        let h0 = tape.add(tokens, pos)?;

        let depth = self.config.depth;
        let mut outputs = Vec::with_capacity(depth + 1);
        outputs.push(h0);
        let mut mode = Mode::Eval;
        for i in 1..=depth {
            let mut input = outputs[i - 1];
            if i > depth / 2 {
                let skip = outputs[depth - i];
                let cat = tape.concat_cols(&[input, skip])?;
                input = self.skip_fuse[i - depth / 2 - 1].forward(tape, store, cat)?;
            }
            let mut out = self.blocks[i - 1].forward(tape, store, input, &mut mode)?;
            if opts.zero_deep_path && i == depth / 2 {
                out = tape.scale(out, 0.0);
            }
            outputs.push(out);
        }
        let h = self.norm.forward(tape, store, outputs[depth])?;
        let xs = tape.slice_rows(h, 2, s.cond_tokens)?;
        let ys = tape.slice_rows(h, 2 + s.cond_tokens, s.target_tokens)?;
        let eps_x = self.x_out.forward(tape, store, xs)?;
        let eps_y = self.y_out.forward(tape, store, ys)?;
        Ok((eps_x, eps_y))
    }

    /// Eval-only convenience over plain matrices.
    pub fn predict_noise(
        &self,
        store: &ParamStore,
        x_noisy: &Matrix,
        y_noisy: &Matrix,
        t_x: usize,
        t_y: usize,
    ) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let x = tape.constant(x_noisy.clone());
        let y = tape.constant(y_noisy.clone());
        let (ex, ey) = self.predict(&mut tape, store, x, y, t_x, t_y, UvitOptions::default())?;
        Ok((tape.value(ex).clone(), tape.value(ey).clone()))
    }

    /// `ε̂_y` with the condition held clean (`t_x = 0`).
    pub fn conditional_noise(&self, store: &ParamStore, y_noisy: &Matrix, x_clean: &Matrix, t_y: usize) -> Result<Matrix> {
        Ok(self.predict_noise(store, x_clean, y_noisy, 0, t_y)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use rand::SeedableRng;

    fn tiny() -> (ParamStore, Uvit) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = UvitConfig { depth: 4, width: 16, n_heads: 2, time_embed_dim: 8 };
        let shape = UvitShape { cond_tokens: 5, cond_dim: 6, target_tokens: 3, target_dim: 2, max_timestep: 20 };
        let net = Uvit::build(&mut store, cfg, shape, &mut rng).unwrap();
        (store, net)
    }

    fn inputs(seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (gaussian(5, 6, 1.0, &mut rng), gaussian(3, 2, 1.0, &mut rng))
    }

    #[test]
    fn shapes_and_names() {
        let (store, net) = tiny();
        let (x, y) = inputs(1);
        let (ex, ey) = net.predict_noise(&store, &x, &y, 3, 17).unwrap();
        assert_eq!(ex.shape(), (5, 6));
        assert_eq!(ey.shape(), (3, 2));
        assert!(store.entries().iter().all(|e| e.name.starts_with("uvit.")));
        assert_eq!(net.skip_fuse.len(), 2);
    }

    #[test]
    fn timestep_and_token_sensitivity() {
        let (store, net) = tiny();
        let (x, y) = inputs(2);
        let (_, a) = net.predict_noise(&store, &x, &y, 0, 5).unwrap();
        let (_, b) = net.predict_noise(&store, &x, &y, 0, 6).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-8);

        let mut y2 = y.clone();
        y2.set(2, 1, y2.get(2, 1) + 1.0);
        let (xa, _) = net.predict_noise(&store, &x, &y, 4, 4).unwrap();
        let (xb, _) = net.predict_noise(&store, &x, &y2, 4, 4).unwrap();
        assert!(xa.max_abs_diff(&xb) > 1e-10, "denoiser must attend across modalities");

        let shuffled = Matrix::concat_rows(&[&y.slice_rows(2, 1).unwrap(), &y.slice_rows(0, 2).unwrap()]).unwrap();
        let (_, c) = net.predict_noise(&store, &x, &shuffled, 0, 5).unwrap();
        let unshuffled = Matrix::concat_rows(&[&c.slice_rows(1, 2).unwrap(), &c.slice_rows(0, 1).unwrap()]).unwrap();
        assert!(unshuffled.max_abs_diff(&a) > 1e-10, "positional embeddings must break permutation symmetry");
    }

    #[test]
    fn conditional_wrapper_matches() {
        let (store, net) = tiny();
        let (x, y) = inputs(3);
        let full = net.predict_noise(&store, &x, &y, 0, 9).unwrap().1;
        let cond = net.conditional_noise(&store, &y, &x, 9).unwrap();
        assert_eq!(full, cond);
        assert_eq!(cond, net.conditional_noise(&store, &y, &x, 9).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, net) = tiny();
        let (x, y) = inputs(4);
        assert!(net.predict_noise(&store, &y, &y, 0, 1).is_err());
        assert!(net.predict_noise(&store, &x, &x, 0, 1).is_err());
        assert!(net.predict_noise(&store, &x, &y, 21, 1).is_err());
        assert!(UvitConfig { depth: 3, ..Default::default() }.validate().is_err());
        assert!(UvitConfig { width: 30, n_heads: 4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn skips_carry_signal_without_deep_path() {
        let (store, net) = tiny();
        let (x, y) = inputs(5);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let (_, ey) = net.predict(&mut tape, &store, xv, yv, 2, 2, UvitOptions { zero_deep_path: true }).unwrap();
        let loss = tape.sum_squares(ey);
        let g = tape.backward(loss).unwrap();
        assert!(g.of(yv).unwrap().norm() > 1e-8);
        assert!(g.of(xv).unwrap().norm() > 1e-8);
    }
}
