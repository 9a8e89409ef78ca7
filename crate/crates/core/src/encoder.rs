//! Temporal-memory encoder.
//!
//! Each time step is one token. The embedding stage projects the `d`
//! channels to width `m`, adds a learned position vector and runs one
//! trainable transformer layer. A stack of frozen GPT-2-style blocks with
//! low-rank adapters on Q/K/V follows, and a flatten-then-linear head maps
//! the `T × m` hidden states to an `H × d` forecast.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::lora::LoraConfig;
use crate::nn::{dropout, BlockSpec, Builder, Linear, Mode, TransformerBlock, INIT_STD};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input channels `d`.
    pub channels: usize,
    /// Embedding width `m`.
    pub width: usize,
    pub n_heads: usize,
    pub dropout_p: f64,
    /// Number of backbone blocks; 0 is allowed and reduces `encode` to `embed`.
    pub n_blocks: usize,
    pub lora: LoraConfig,
    /// Rows of the learned position table; bounds the usable lookback.
    pub max_context: usize,
    /// Lookback `T` the head is shaped for.
    pub lookback: usize,
    /// Horizon `H` the head is shaped for.
    pub horizon: usize,
    /// Divide each per-step squared norm by `d` in the forecasting loss.
    pub channel_mean: bool,
    /// Let the embedding layer attend to future steps.
    pub embed_bidirectional: bool,
    /// Seed for a randomly initialized backbone.
    pub backbone_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 7,
            width: 64,
            n_heads: 4,
            dropout_p: 0.3,
            n_blocks: 6,
            lora: LoraConfig::default(),
            max_context: 512,
            lookback: 96,
            horizon: 96,
            channel_mean: true,
            embed_bidirectional: false,
            backbone_seed: 0x6770_7432,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.lookback == 0 || self.horizon == 0 {
            return Err(config_err("encoder channels, width, lookback and horizon must be positive"));
        }
        if self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) {
            return Err(config_err(format!("encoder width {} not divisible by {} heads", self.width, self.n_heads)));
        }
        if self.n_blocks > 12 {
            return Err(config_err(format!("encoder uses at most 12 blocks, got {}", self.n_blocks)));
        }
        if self.lookback > self.max_context {
            return Err(config_err(format!("lookback {} exceeds max_context {}", self.lookback, self.max_context)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err("encoder dropout must lie in [0, 1)"));
        }
        self.lora.validate()?;
        if self.n_blocks > 0 && self.lora.rank > self.width {
            return Err(config_err(format!("lora rank {} exceeds width {}", self.lora.rank, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Linear,
    pub position: ParamId,
    pub embed_layer: TransformerBlock,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
}

/// Trainable-parameter counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub lora: usize,
    pub embedding: usize,
    pub head: usize,
    pub frozen: usize,
}

impl ParamBreakdown {
    pub fn trainable(&self) -> usize {
        self.lora + self.embedding + self.head
    }
}

impl Encoder {
    /// Registers `embedding.*`, `block<i>.*` and `head.*` tensors. The
    /// backbone is drawn from `config.backbone_seed`; everything else from `rng`.
    pub fn build(store: &mut ParamStore, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let m = config.width;
        let mut b = Builder::new(store, rng, ParamGroup::Encoder, ParamKind::Trainable, "embedding");
        // fan-in scale so tokens enter the stream at unit size, comparable to
        // the unit noise the denoiser adds to them
        let input = b.linear("input", config.channels, m, 1.0 / libm::sqrt(config.channels as f64))?;
        let position = b.gaussian("position", config.max_context, m, INIT_STD)?;
        let spec = BlockSpec {
            width: m,
            n_heads: config.n_heads,
            causal: !config.embed_bidirectional,
            dropout_p: config.dropout_p,
            adapters: None,
        };
        let embed_layer = TransformerBlock::build(&mut b.scoped("layer"), spec, 1)?;

        let mut backbone_rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let mut bb = Builder::new(b.store, &mut backbone_rng, ParamGroup::Encoder, ParamKind::Frozen, format!("block{i}"));
            let spec = BlockSpec {
                width: m,
                n_heads: config.n_heads,
                causal: true,
                dropout_p: config.dropout_p,
                adapters: Some(config.lora),
            };
            blocks.push(TransformerBlock::build(&mut bb, spec, config.n_blocks)?);
        }

        let mut hb = Builder::new(b.store, b.rng, ParamGroup::Encoder, ParamKind::Trainable, "");
        let head = hb.linear("head", config.lookback * m, config.horizon * config.channels, INIT_STD)?;
        Ok(Self { config, input, position, embed_layer, blocks, head })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (t, d) = tape.value(x).shape();
        if d != self.config.channels {
            return Err(Error::Shape(format!("context has {d} channels, encoder expects {}", self.config.channels)));
        }
        if t == 0 || t > self.config.max_context {
            return Err(Error::Shape(format!("context length {t} outside 1..={}", self.config.max_context)));
        }
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        Ok(())
    }

    /// `T × d` context to `T × m` tokens.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.check_input(tape, x)?;
        let t = tape.value(x).rows();
        let h = self.input.forward(tape, store, x)?;
        let pos = tape.param(store, self.position);
        let pos = tape.slice_rows(pos, 0, t)?;
        let h = tape.add(h, pos)?;
        let h = dropout(tape, h, self.config.dropout_p, mode)?;
        self.embed_layer.forward(tape, store, h, mode)
    }

    /// Hidden states after the embedding and every backbone block.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let mut h = self.embed(tape, store, x, mode)?;
        if !tape.value(h).is_finite() {
            return Err(Error::NonFinite("embedding output".into()));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, store, h, mode)?;
            if !tape.value(h).is_finite() {
                return Err(Error::NonFinite(format!("block{i} output")));
            }
        }
        Ok(h)
    }

    /// Applies the linear head to `T × m` hidden states, yielding `H × d`.
    pub fn head_forward(&self, tape: &mut Tape, store: &ParamStore, repr: Var) -> Result<Var> {
        let (t, m) = tape.value(repr).shape();
        if t != self.config.lookback {
            return Err(Error::Shape(format!("head expects {} steps, got {t}", self.config.lookback)));
        }
        let flat = tape.reshape(repr, 1, t * m)?;
        let out = self.head.forward(tape, store, flat)?;
        tape.reshape(out, self.config.horizon, self.config.channels)
    }

    pub fn forecast(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let repr = self.encode(tape, store, x, mode)?;
        self.head_forward(tape, store, repr)
    }

    /// Every tensor of the frozen backbone with its shape.
    pub fn backbone_tensors<'s>(&self, store: &'s ParamStore) -> Vec<(&'s str, (usize, usize))> {
        store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("block") && e.kind == ParamKind::Frozen)
            .map(|e| (e.name.as_str(), e.value.shape()))
            .collect()
    }

    /// Populates the frozen backbone from named tensors and resets every
    /// adapter. Extra names are ignored; every missing or mis-shaped backbone
    /// tensor is reported in one error.
    pub fn load_backbone_weights(
        &self,
        store: &mut ParamStore,
        tensors: &BTreeMap<String, Matrix>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let mut problems = Vec::new();
        for (name, shape) in self.backbone_tensors(store) {
            match tensors.get(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(m) if m.shape() != shape => {
                    problems.push(format!("{name} (expected {shape:?}, got {:?})", m.shape()))
                }
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Weights(problems.join(", ")));
        }
        let names: Vec<String> = self.backbone_tensors(store).into_iter().map(|(n, _)| n.into()).collect();
        for name in names {
            let id = store.lookup(&name).expect("listed above");
            store.assign(id, tensors[&name].clone())?;
        }
        for block in &self.blocks {
            for (_, l) in block.adapters() {
                l.reinit(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.adapters().flat_map(|(_, l)| [l.a, l.b]).collect::<Vec<_>>())
            .collect()
    }

    pub fn trainable_parameter_count(&self, store: &ParamStore) -> ParamBreakdown {
        let lora = self.blocks.iter().flat_map(|b| b.adapters()).map(|(_, l)| l.trainable_count()).sum();
        let head = self.head.param_ids().map(|id| store.value(id).len()).sum();
        let in_group = |e: &crate::params::ParamEntry| e.group == ParamGroup::Encoder;
        let embedding = store.count_where(|e| in_group(e) && e.name.starts_with("embedding.") && e.kind.is_trainable());
        let frozen = store.count_where(|e| in_group(e) && e.kind == ParamKind::Frozen);
        ParamBreakdown { lora, embedding, head, frozen }
    }
}

/// `(1/H) Σ_t ‖ŷ_t − y_t‖²`, optionally divided by `d`.
pub fn encoder_loss(pred: &Matrix, target: &Matrix, channel_mean: bool) -> Result<f64> {
    let diff = pred.sub(target)?;
    let (h, d) = target.shape();
    let mut l = diff.sum_squares() / h.max(1) as f64;
    if channel_mean {
        l /= d.max(1) as f64;
    }
    Ok(l)
}

pub fn encoder_loss_var(tape: &mut Tape, pred: Var, target: &Matrix, channel_mean: bool) -> Result<Var> {
    let (h, d) = target.shape();
    if tape.value(pred).shape() != (h, d) {
        return Err(Error::Shape(format!("forecast {:?} vs target {:?}", tape.value(pred).shape(), (h, d))));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let s = tape.sum_squares(diff);
    let denom = if channel_mean { (h * d) as f64 } else { h as f64 };
    Ok(tape.scale(s, 1.0 / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;

    fn tiny(n_blocks: usize) -> EncoderConfig {
        EncoderConfig {
            channels: 3,
            width: 8,
            n_heads: 2,
            dropout_p: 0.0,
            n_blocks,
            lora: LoraConfig { rank: 2, alpha: 4.0, dropout_p: 0.0 },
            max_context: 16,
            lookback: 6,
            horizon: 2,
            ..Default::default()
        }
    }

    fn build(cfg: EncoderConfig) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::build(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn run(enc: &Encoder, store: &ParamStore, x: &Matrix, f: fn(&Encoder, &mut Tape, &ParamStore, Var, &mut Mode<'_>) -> Result<Var>) -> Matrix {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(enc, &mut tape, store, v, &mut Mode::Eval).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn loss_examples() {
        let y = Matrix::filled(3, 2, 0.7);
        assert_eq!(encoder_loss(&y, &y, true).unwrap(), 0.0);
        assert_eq!(encoder_loss(&Matrix::scalar(0.0), &Matrix::scalar(2.0), true).unwrap(), 4.0);
        let ones = Matrix::filled(2, 2, 1.0);
        assert_eq!(encoder_loss(&Matrix::zeros(2, 2), &ones, false).unwrap(), 2.0);
        assert_eq!(encoder_loss(&Matrix::zeros(2, 2), &ones, true).unwrap(), 1.0);
        assert!(encoder_loss(&Matrix::zeros(2, 3), &ones, true).is_err());
        let mut tape = Tape::new();
        let p = tape.constant(Matrix::zeros(2, 2));
        let l = encoder_loss_var(&mut tape, p, &ones, false).unwrap();
        assert_eq!(tape.scalar_value(l), 2.0);
    }

    #[test]
    fn shapes_and_zero_blocks() {
        let (store, enc) = build(tiny(0));
        let x = Matrix::zeros(6, 3);
        let e = run(&enc, &store, &x, Encoder::embed);
        assert_eq!(e.shape(), (6, 8));
        assert!(e.is_finite());
        assert_eq!(run(&enc, &store, &x, Encoder::encode), e);
        assert_eq!(run(&enc, &store, &x, Encoder::forecast).shape(), (2, 3));
    }

    #[test]
    fn default_shaped_embedding() {
        let cfg = EncoderConfig { channels: 7, width: 64, n_blocks: 1, lookback: 96, max_context: 96, ..Default::default() };
        let (store, enc) = build(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(96, 7, 1.0, &mut rng);
        assert_eq!(run(&enc, &store, &x, Encoder::embed).shape(), (96, 64));
        assert_eq!(run(&enc, &store, &x, Encoder::forecast).shape(), (96, 7));
    }

    #[test]
    fn channel_permutation_with_permuted_columns() {
        let (mut store, enc) = build(tiny(1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(6, 3, 1.0, &mut rng);
        let before = run(&enc, &store, &x, Encoder::embed);
        let perm = [2, 0, 1];
        let xp = Matrix::from_fn(6, 3, |r, c| x.get(r, perm[c]));
        let w = store.value(enc.input.weight).clone();
        let wp = Matrix::from_fn(w.rows(), 3, |r, c| w.get(r, perm[c]));
        store.assign(enc.input.weight, wp).unwrap();
        let after = run(&enc, &store, &xp, Encoder::embed);
        assert!(before.max_abs_diff(&after) < 1e-9);
    }

    #[test]
    fn encode_is_causal() {
        let (store, enc) = build(tiny(2));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(6, 3, 1.0, &mut rng);
        let base = run(&enc, &store, &x, Encoder::encode);
        for t in 0..6 {
            let mut xp = x.clone();
            xp.set(t, 1, xp.get(t, 1) + 3.0);
            let out = run(&enc, &store, &xp, Encoder::encode);
            for r in 0..t {
                assert!(
                    crate::tensor::dot(base.row(r), base.row(r)) > 0.0
                        && base.row(r).iter().zip(out.row(r)).all(|(a, b)| (a - b).abs() < 1e-9),
                    "row {r} changed after perturbing step {t}"
                );
            }
            assert!(base.slice_rows(t, 1).unwrap().max_abs_diff(&out.slice_rows(t, 1).unwrap()) > 1e-9);
        }
    }

    #[test]
    fn bidirectional_embedding_breaks_causality() {
        let (store, enc) = build(EncoderConfig { embed_bidirectional: true, ..tiny(0) });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(6, 3, 1.0, &mut rng);
        let mut xp = x.clone();
        xp.set(5, 0, 4.0);
        let a = run(&enc, &store, &x, Encoder::embed);
        let b = run(&enc, &store, &xp, Encoder::embed);
        assert!(a.slice_rows(0, 1).unwrap().max_abs_diff(&b.slice_rows(0, 1).unwrap()) > 1e-12);
    }

    #[test]
    fn validation_errors() {
        assert!(EncoderConfig { width: 10, n_heads: 4, ..tiny(1) }.validate().is_err());
        assert!(EncoderConfig { n_blocks: 13, ..tiny(1) }.validate().is_err());
        assert!(EncoderConfig { lookback: 32, ..tiny(1) }.validate().is_err());
        let (store, enc) = build(tiny(1));
        let mut tape = Tape::new();
        let v = tape.constant(Matrix::zeros(6, 4));
        assert!(matches!(enc.embed(&mut tape, &store, v, &mut Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn lora_parameter_count_closed_form() {
        let cfg = EncoderConfig {
            channels: 7,
            width: 64,
            n_heads: 4,
            n_blocks: 6,
            lora: LoraConfig::default(),
            lookback: 8,
            horizon: 4,
            max_context: 8,
            ..Default::default()
        };
        let (store, enc) = build(cfg);
        let bd = enc.trainable_parameter_count(&store);
        assert_eq!(bd.lora, 3 * 6 * (8 * 64 + 64 * 8));
        assert_eq!(bd.lora, 18_432);
        // enumerate the adapter tensors directly
        let enumerated = store.count_where(|e| e.kind == ParamKind::Lora);
        assert_eq!(enumerated, 18_432);
        assert_eq!(bd.head, 8 * 64 * 4 * 7 + 4 * 7);
    }

    #[test]
    fn backbone_load_round_trip_and_errors() {
        let (mut store, enc) = build(tiny(2));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in enc.backbone_tensors(&store) {
            tensors.insert(String::from(name), gaussian(r, c, 0.5, &mut rng));
        }
        enc.load_backbone_weights(&mut store, &tensors, &mut rng).unwrap();
        for (name, m) in &tensors {
            assert_eq!(store.value(store.lookup(name).unwrap()), m);
        }
        for id in enc.adapter_ids() {
            let e = store.entry(id);
            if e.name.ends_with("lora_B") {
                assert!(e.value.as_slice().iter().all(|&v| v == 0.0));
            }
        }
        let mut short = tensors.clone();
        short.retain(|k, _| k.starts_with("block0."));
        let err = enc.load_backbone_weights(&mut store, &short, &mut rng).unwrap_err();
        assert!(matches!(&err, Error::Weights(msg) if msg.contains("block1.q.weight")));
        let mut wrong = tensors.clone();
        wrong.insert("block0.mlp_fc.weight".into(), Matrix::zeros(2, 2));
        assert!(enc.load_backbone_weights(&mut store, &wrong, &mut rng).is_err());
    }

    #[test]
    fn random_backbone_is_reproducible() {
        let (s1, e1) = build(tiny(2));
        let (s2, e2) = build(tiny(2));
        let x = Matrix::from_fn(6, 3, |r, c| (r as f64 - c as f64) * 0.3);
        assert_eq!(run(&e1, &s1, &x, Encoder::encode), run(&e2, &s2, &x, Encoder::encode));
    }
}
