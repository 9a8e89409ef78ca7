//! Layers shared by the encoder and the denoiser.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::params::{gaussian, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::Matrix;

/// Standard deviation used for every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

/// Forward-pass mode. Dropout only fires in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Reborrows so the mode can be threaded through nested calls.
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}

/// Inverted dropout: kept entries are scaled by `1/(1-p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let (r, c) = tape.value(x).shape();
            let keep = 1.0 / (1.0 - p);
            let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep });
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// Registers tensors under a common name prefix, kind, and group.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
    pub kind: ParamKind,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
        group: ParamGroup,
        kind: ParamKind,
        prefix: impl Into<String>,
    ) -> Self {
        Self { store, rng, group, kind, prefix: prefix.into() }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.into()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Child builder with `prefix.sub` as its prefix.
    pub fn scoped(&mut self, sub: &str) -> Builder<'_> {
        let prefix = self.name(sub);
        Builder { store: self.store, rng: self.rng, group: self.group, kind: self.kind, prefix }
    }

    pub fn with_kind(&mut self, kind: ParamKind) -> Builder<'_> {
        Builder { store: self.store, rng: self.rng, group: self.group, kind, prefix: self.prefix.clone() }
    }

    pub fn tensor(&mut self, leaf: &str, value: Matrix) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.insert(name, value, self.kind, self.group)
    }

    pub fn gaussian(&mut self, leaf: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let m = gaussian(rows, cols, std, self.rng);
        self.tensor(leaf, m)
    }

    pub fn linear(&mut self, leaf: &str, d_in: usize, d_out: usize, std: f64) -> Result<Linear> {
        let mut b = self.scoped(leaf);
        let weight = b.gaussian("weight", d_out, d_in, std)?;
        let bias = b.tensor("bias", Matrix::zeros(1, d_out))?;
        Ok(Linear { weight, bias: Some(bias), d_in, d_out })
    }

    pub fn layer_norm(&mut self, leaf: &str, dim: usize) -> Result<LayerNorm> {
        let mut b = self.scoped(leaf);
        let gamma = b.tensor("weight", Matrix::filled(1, dim, 1.0))?;
        let beta = b.tensor("bias", Matrix::zeros(1, dim))?;
        Ok(LayerNorm { gamma, beta })
    }
}

/// `y = x Wᵀ + b` with `W` stored `d_out × d_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        core::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// A projection that is either a plain linear map or a LoRA-adapted one.
#[derive(Clone, Debug)]
pub enum Projection {
    Plain(Linear),
    Adapted(LoraLinear),
}

impl Projection {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match self {
            Projection::Plain(l) => l.forward(tape, store, x),
            Projection::Adapted(l) => l.forward(tape, store, x, mode),
        }
    }

    pub fn lora(&self) -> Option<&LoraLinear> {
        match self {
            Projection::Adapted(l) => Some(l),
            Projection::Plain(_) => None,
        }
    }
}

/// Multi-head self-attention over the rows of a `tokens × width` matrix.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Linear,
    pub n_heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let q = self.q.forward(tape, store, x, mode)?;
        let k = self.k.forward(tape, store, x, mode)?;
        let v = self.v.forward(tape, store, x, mode)?;
        let width = tape.value(q).cols();
        if !width.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("width {width} not divisible by {} heads", self.n_heads)));
        }
        let head = width / self.n_heads;
        let inv_sqrt = 1.0 / libm::sqrt(head as f64);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * head, head)?;
            let kh = tape.slice_cols(k, h * head, head)?;
            let vh = tape.slice_cols(v, h * head, head)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.softmax_rows(scores, self.causal);
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.out.forward(tape, store, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln1 x)` then `x + mlp(ln2 x)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
    pub dropout_p: f64,
}

/// Which of the attention input projections receive low-rank adapters.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub width: usize,
    pub n_heads: usize,
    pub causal: bool,
    pub dropout_p: f64,
    pub adapters: Option<crate::lora::LoraConfig>,
}

impl TransformerBlock {
    /// Registers `ln1, q, k, v, attn_out, ln2, mlp_fc, mlp_proj` under the
    /// builder's prefix. With adapters, the q/k/v bases are frozen and each
    /// gets `lora_A`/`lora_B` factors.
    pub fn build(b: &mut Builder<'_>, spec: BlockSpec, n_layers_for_init: usize) -> Result<Self> {
        let w = spec.width;
        if spec.n_heads == 0 || !w.is_multiple_of(spec.n_heads) {
            return Err(Error::Config(format!("width {w} not divisible by {} heads", spec.n_heads)));
        }
        let ln1 = b.layer_norm("ln1", w)?;
        let proj = |b: &mut Builder<'_>, leaf: &str| -> Result<Projection> {
            match spec.adapters {
                Some(cfg) => Ok(Projection::Adapted(LoraLinear::build(b, leaf, w, w, cfg)?)),
                None => Ok(Projection::Plain(b.linear(leaf, w, w, INIT_STD)?)),
            }
        };
        let q = proj(b, "q")?;
        let k = proj(b, "k")?;
        let v = proj(b, "v")?;
        // GPT-2 scales residual-path projections by 1/sqrt(2·layers)
        let resid_std = INIT_STD / libm::sqrt(2.0 * n_layers_for_init.max(1) as f64);
        let out = b.linear("attn_out", w, w, resid_std)?;
        let ln2 = b.layer_norm("ln2", w)?;
        let fc = b.linear("mlp_fc", w, 4 * w, INIT_STD)?;
        let proj_out = b.linear("mlp_proj", 4 * w, w, resid_std)?;
        Ok(Self {
            ln1,
            attn: SelfAttention { q, k, v, out, n_heads: spec.n_heads, causal: spec.causal },
            ln2,
            fc,
            proj: proj_out,
            dropout_p: spec.dropout_p,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, mode)?;
        let a = dropout(tape, a, self.dropout_p, mode)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.proj.forward(tape, store, h)?;
        let h = dropout(tape, h, self.dropout_p, mode)?;
        tape.add(x, h)
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&'static str, &LoraLinear)> {
        [("q", &self.attn.q), ("k", &self.attn.k), ("v", &self.attn.v)]
            .into_iter()
            .filter_map(|(n, p)| p.lora().map(|l| (n, l)))
    }
}

/// Sinusoidal features of a scalar position/timestep, `1 × dim`.
pub fn sinusoidal(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(1, dim);
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half.max(1) as f64);
        out.set(0, k, libm::sin(t * freq));
        out.set(0, half + k, libm::cos(t * freq));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_dropout_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(3, 3, 1.0));
        let y = dropout(&mut t, x, 0.5, &mut Mode::Eval).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn train_dropout_zeroes_and_rescales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(50, 50, 1.0));
        let y = dropout(&mut t, x, 0.5, &mut Mode::Train(&mut rng)).unwrap();
        let v = t.value(y);
        assert!(v.as_slice().iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.as_slice().iter().filter(|&&e| e > 0.0).count() as f64 / 2500.0;
        assert!((kept - 0.5).abs() < 0.05);
    }

    #[test]
    fn sinusoidal_distinct() {
        let a = sinusoidal(3.0, 16);
        let b = sinusoidal(4.0, 16);
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert_eq!(sinusoidal(0.0, 4).as_slice(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn causal_block_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Encoder, ParamKind::Trainable, "blk");
        let spec = BlockSpec { width: 8, n_heads: 2, causal: true, dropout_p: 0.0, adapters: None };
        let block = TransformerBlock::build(&mut b, spec, 1).unwrap();
        let x = gaussian(5, 8, 1.0, &mut rng);
        let mut x2 = x.clone();
        x2.set(3, 0, 7.0);
        let run = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let o = block.forward(&mut t, &store, v, &mut Mode::Eval).unwrap();
            t.value(o).clone()
        };
        let (a, c) = (run(&x), run(&x2));
        for r in 0..3 {
            assert_eq!(a.row(r), c.row(r));
        }
        assert!(a.slice_rows(3, 2).unwrap().max_abs_diff(&c.slice_rows(3, 2).unwrap()) > 1e-6);
    }
}
