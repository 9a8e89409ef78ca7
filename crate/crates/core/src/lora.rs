//! Low-rank adaptation of frozen linear projections.
//!
//! An adapted projection computes
//! `y = x Wᵀ + b + (alpha / r) · (drop(x) Aᵀ) Bᵀ`
//! where `W`, `b` stay frozen and only `A` (`r × d_in`) and `B`
//! (`d_out × r`) train. `B` starts at zero so a fresh adapter reproduces the
//! frozen projection exactly.

use alloc::format;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::{dropout, Builder, Linear, Mode, INIT_STD};
use crate::params::{gaussian, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 32.0, dropout_p: 0.1 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err("lora rank must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(config_err("lora alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err("lora dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scaling: f64,
    pub dropout_p: f64,
}

impl LoraLinear {
    /// Registers a frozen `leaf.weight`/`leaf.bias` plus trainable
    /// `leaf.lora_A`/`leaf.lora_B`.
    pub fn build(b: &mut Builder<'_>, leaf: &str, d_in: usize, d_out: usize, cfg: LoraConfig) -> Result<Self> {
        check_rank(cfg, d_in, d_out)?;
        let base = b.with_kind(ParamKind::Frozen).linear(leaf, d_in, d_out, INIT_STD)?;
        let mut lb = b.scoped(leaf);
        let mut lb = lb.with_kind(ParamKind::Lora);
        let a = lb.gaussian("lora_A", cfg.rank, d_in, INIT_STD)?;
        let bm = lb.tensor("lora_B", Matrix::zeros(d_out, cfg.rank))?;
        Ok(Self { base, a, b: bm, rank: cfg.rank, scaling: cfg.scaling(), dropout_p: cfg.dropout_p })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let base = self.base.forward(tape, store, x)?;
        let xd = dropout(tape, x, self.dropout_p, mode)?;
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let low = tape.matmul_t(xd, a)?;
        let delta = tape.matmul_t(low, b)?;
        let delta = tape.scale(delta, self.scaling);
        tape.add(base, delta)
    }

    /// Fresh adapter state: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn reinit(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (r, d_in) = store.value(self.a).shape();
        store.assign(self.a, gaussian(r, d_in, INIT_STD, rng))?;
        let (d_out, r) = store.value(self.b).shape();
        store.assign(self.b, Matrix::zeros(d_out, r))
    }

    pub fn trainable_count(&self) -> usize {
        self.rank * (self.base.d_in + self.base.d_out)
    }
}

fn check_rank(cfg: LoraConfig, d_in: usize, d_out: usize) -> Result<()> {
    cfg.validate()?;
    if cfg.rank > d_in.min(d_out) {
        return Err(config_err(format!(
            "lora rank {} exceeds min(d_in={d_in}, d_out={d_out})",
            cfg.rank
        )));
    }
    Ok(())
}

/// A single adapted projection that owns its tensors.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    store: ParamStore,
    layer: LoraLinear,
}

impl LoraAdapter {
    /// Wraps a frozen `d_out × d_in` weight (and optional `1 × d_out` bias).
    pub fn init(frozen_w: Matrix, frozen_bias: Option<Matrix>, cfg: LoraConfig, seed: u64) -> Result<Self> {
        if !frozen_w.is_finite() {
            return Err(Error::NonFinite("frozen weight".into()));
        }
        let (d_out, d_in) = frozen_w.shape();
        check_rank(cfg, d_in, d_out)?;
        let mut store = ParamStore::new();
        let g = ParamGroup::Encoder;
        let weight = store.insert("weight", frozen_w, ParamKind::Frozen, g)?;
        let bias = match frozen_bias {
            Some(b) => {
                if b.shape() != (1, d_out) {
                    return Err(Error::Shape(format!("bias {:?} for {d_out} outputs", b.shape())));
                }
                Some(store.insert("bias", b, ParamKind::Frozen, g)?)
            }
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = store.insert("lora_A", gaussian(cfg.rank, d_in, INIT_STD, &mut rng), ParamKind::Lora, g)?;
        let b = store.insert("lora_B", Matrix::zeros(d_out, cfg.rank), ParamKind::Lora, g)?;
        let layer = LoraLinear {
            base: Linear { weight, bias, d_in, d_out },
            a,
            b,
            rank: cfg.rank,
            scaling: cfg.scaling(),
            dropout_p: cfg.dropout_p,
        };
        Ok(Self { store, layer })
    }

    /// Applies the adapted projection to each row of `x` (`batch × d_in`).
    pub fn adapted_forward(&self, x: &Matrix, mut mode: Mode<'_>) -> Result<Matrix> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.layer.forward(&mut tape, &self.store, v, &mut mode)?;
        Ok(tape.value(y).clone())
    }

    pub fn frozen_forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.layer.base.forward(&mut tape, &self.store, v)?;
        Ok(tape.value(y).clone())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.layer.base.d_in {
            return Err(Error::Shape(format!("input has {} features, adapter expects {}", x.cols(), self.layer.base.d_in)));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("adapter input".into()));
        }
        Ok(())
    }

    pub fn layer(&self) -> &LoraLinear {
        &self.layer
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn a(&self) -> &Matrix {
        self.store.value(self.layer.a)
    }

    pub fn b(&self) -> &Matrix {
        self.store.value(self.layer.b)
    }

    pub fn frozen_weight(&self) -> &Matrix {
        self.store.value(self.layer.base.weight)
    }

    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        self.store.assign(self.layer.a, a)?;
        self.store.assign(self.layer.b, b)
    }

    pub fn scaling(&self) -> f64 {
        self.layer.scaling
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.layer.trainable_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn no_dropout(rank: usize, alpha: f64) -> LoraConfig {
        LoraConfig { rank, alpha, dropout_p: 0.0 }
    }

    #[test]
    fn fresh_adapter_matches_frozen_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = gaussian(6, 5, 1.0, &mut rng);
        let bias = gaussian(1, 6, 1.0, &mut rng);
        let adapter = LoraAdapter::init(w, Some(bias), LoraConfig { rank: 2, ..Default::default() }, 1).unwrap();
        let x = gaussian(4, 5, 1.0, &mut rng);
        assert_eq!(adapter.adapted_forward(&x, Mode::Eval).unwrap(), adapter.frozen_forward(&x).unwrap());
        assert!(adapter.b().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_low_rank_update() {
        let mut adapter = LoraAdapter::init(Matrix::identity(2), None, no_dropout(1, 1.0), 0).unwrap();
        adapter
            .set_factors(Matrix::from_rows(&[[1.0, 0.0]]), Matrix::from_rows(&[[1.0], [0.0]]))
            .unwrap();
        let y = adapter.adapted_forward(&Matrix::from_rows(&[[3.0, 5.0]]), Mode::Eval).unwrap();
        assert_eq!(y.as_slice(), &[6.0, 5.0]);
    }

    #[test]
    fn parameter_counts() {
        let a = LoraAdapter::init(Matrix::zeros(64, 64), None, no_dropout(8, 32.0), 0).unwrap();
        assert_eq!(a.trainable_parameter_count(), 1024);
        assert_eq!(a.a().len() + a.b().len(), 1024);
        let small = LoraAdapter::init(Matrix::zeros(4, 4), None, no_dropout(2, 4.0), 0).unwrap();
        assert_eq!(small.trainable_parameter_count(), 16);
    }

    #[test]
    fn rank_validation() {
        let zero = LoraConfig { rank: 0, ..Default::default() };
        assert!(matches!(LoraAdapter::init(Matrix::zeros(4, 4), None, zero, 0), Err(Error::Config(_))));
        let big = no_dropout(5, 1.0);
        assert!(matches!(LoraAdapter::init(Matrix::zeros(4, 8), None, big, 0), Err(Error::Config(_))));
        let mut w = Matrix::zeros(4, 4);
        w.set(0, 0, f64::NAN);
        assert!(LoraAdapter::init(w, None, no_dropout(2, 1.0), 0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = LoraConfig::default();
        let a = LoraAdapter::init(Matrix::zeros(16, 16), None, cfg, 9).unwrap();
        let b = LoraAdapter::init(Matrix::zeros(16, 16), None, cfg, 9).unwrap();
        assert_eq!(a.a().as_slice(), b.a().as_slice());
        let c = LoraAdapter::init(Matrix::zeros(16, 16), None, cfg, 10).unwrap();
        assert_ne!(a.a().as_slice(), c.a().as_slice());
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let mut adapter = LoraAdapter::init(Matrix::identity(3), None, LoraConfig { rank: 2, alpha: 2.0, dropout_p: 0.5 }, 3).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0], [2.0, 0.0]]);
        let a = adapter.a().clone();
        adapter.set_factors(a, b).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let y1 = adapter.adapted_forward(&x, Mode::Eval).unwrap();
        let y2 = adapter.adapted_forward(&x, Mode::Eval).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(adapter.store().entries().iter().filter(|e| e.kind == ParamKind::Lora).count(), 2);
    }
}
