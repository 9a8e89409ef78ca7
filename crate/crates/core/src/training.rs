//! Encoder pretraining, joint training, and few-shot fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{subsample_fewshot, NormStats, PreparedData, WindowPair};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{evaluate, MetricReport, ModelForecaster, Variant};
use crate::model::{LtsmDiff, ModelConfig};
use crate::nn::Mode;
use crate::optim::{clip_global_norm, Adam};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::sampling::SamplerConfig;
use crate::tensor::Matrix;

const VALIDATION_SALT: u64 = 0x5641_4c49_4441_5445;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    #[default]
    All,
    LoraOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps per phase, if set.
    pub max_steps: Option<usize>,
    /// Global-norm gradient clipping threshold, if set.
    pub grad_clip: Option<f64>,
    pub shuffle: bool,
    pub finetune_scope: FinetuneScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.0005,
            max_epochs: 20,
            patience: 5,
            lambda: 1.0,
            pretrain_epochs: 0,
            seed: 0,
            max_steps: None,
            grad_clip: None,
            shuffle: true,
            finetune_scope: FinetuneScope::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(config_err("batch_size, max_epochs and patience must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err("learning_rate must be a non-negative number"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(config_err("lambda must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(config_err("grad_clip must be positive"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(config_err("max_steps must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub l_llm: f64,
    pub l_diff: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_llm: f64,
    pub train_diff: Option<f64>,
    pub train_total: f64,
    pub val_total: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn extend(&mut self, other: History) {
        self.steps.extend(other.steps);
        self.epochs.extend(other.epochs);
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, stored as a decimal string in JSON.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod u128_string {
    use alloc::string::{String, ToString};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What a training call leaves behind besides the updated model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: History,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub rng: RngState,
}

/// Everything needed to resume or reproduce a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LtsmDiff,
    pub stats: NormStats,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: LtsmDiff, stats: NormStats, outcome: &TrainOutcome) -> Self {
        Self { model, stats, epoch: outcome.epochs_run, best_val_loss: outcome.best_val_loss, rng: outcome.rng }
    }
}

fn updatable(store: &ParamStore, phase: Phase, scope: FinetuneScope) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| {
            let e = store.entry(id);
            let in_scope = match scope {
                FinetuneScope::All => e.kind.is_trainable(),
                FinetuneScope::LoraOnly => e.kind == ParamKind::Lora,
            };
            in_scope && (phase == Phase::Joint || e.group == ParamGroup::Encoder)
        })
        .collect()
}

struct BatchValues {
    llm: f64,
    diff: Option<f64>,
    total: f64,
}

fn batch_step(
    model: &LtsmDiff,
    batch: &[&WindowPair],
    lambda: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<(BatchValues, Option<crate::autodiff::Gradients>)> {
    let with_diff = phase == Phase::Joint && model.has_denoiser();
    let draws: Vec<_> = if with_diff { batch.iter().map(|_| model.draw(rng)).collect() } else { Vec::new() };
    let mut tape = Tape::new();
    let mut mode = if training { Mode::Train(rng) } else { Mode::Eval };
    let loss = model.batch_loss(&mut tape, batch, &draws, lambda, with_diff, &mut mode)?;
    let values = BatchValues {
        llm: tape.scalar_value(loss.llm),
        diff: loss.diff.map(|d| tape.scalar_value(d)),
        total: tape.scalar_value(loss.total),
    };
    let grads = if training { Some(tape.backward(loss.total)?) } else { None };
    Ok((values, grads))
}

fn validation_loss(model: &LtsmDiff, val: &[WindowPair], cfg: &TrainConfig, phase: Phase) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    // same draws every epoch so successive values are comparable
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_SALT);
    let refs: Vec<&WindowPair> = val.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(cfg.batch_size) {
        let (v, _) = batch_step(model, chunk, cfg.lambda, phase, &mut rng, false)?;
        total += v.total * chunk.len() as f64;
    }
    Ok(Some(total / val.len() as f64))
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Matrix> {
    ids.iter().map(|&id| store.value(id).clone()).collect()
}

fn run_phase(
    model: &mut LtsmDiff,
    train: &[WindowPair],
    val: &[WindowPair],
    cfg: &TrainConfig,
    phase: Phase,
    scope: FinetuneScope,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for w in train.iter().chain(val) {
        if w.context.shape() != (model.lookback(), model.channels()) || w.target.shape() != (model.horizon(), model.channels()) {
            return Err(Error::Shape(format!(
                "window {:?}/{:?} does not fit model ({}x{} -> {}x{})",
                w.context.shape(),
                w.target.shape(),
                model.lookback(),
                model.channels(),
                model.horizon(),
                model.channels()
            )));
        }
    }
    let ids = updatable(&model.store, phase, scope);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<Matrix>)> = None;
    let mut stale = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    'epochs: for epoch in 0..epochs {
        if cfg.shuffle {
            order.shuffle(rng);
        }
        let (mut sum_llm, mut sum_diff, mut sum_total, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut any_diff = false;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&WindowPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (v, grads) = batch_step(model, &batch, cfg.lambda, phase, rng, true)?;
            if !v.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} batch {bi}: l_llm={} l_diff={:?} total={}",
                    v.llm, v.diff, v.total
                )));
            }
            let grads = grads.expect("training step");
            let mut update: Vec<(ParamId, Matrix)> =
                ids.iter().filter_map(|&id| grads.param(id).map(|g| (id, g.clone()))).collect();
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(update.iter_mut().map(|(_, g)| g), c);
            }
            opt.step(&mut model.store, update.iter().map(|(id, g)| (*id, g)))?;
            history.steps.push(StepRecord { phase, epoch, step, l_llm: v.llm, l_diff: v.diff, total: v.total });
            sum_llm += v.llm;
            sum_total += v.total;
            if let Some(d) = v.diff {
                sum_diff += d;
                any_diff = true;
            }
            n += 1;
            step += 1;
        }
        if n == 0 {
            break;
        }
        epochs_run += 1;
        let val_total = validation_loss(model, val, cfg, phase)?;
        let nf = n as f64;
        history.epochs.push(EpochRecord {
            phase,
            epoch,
            train_llm: sum_llm / nf,
            train_diff: any_diff.then(|| sum_diff / nf),
            train_total: sum_total / nf,
            val_total,
        });
        if let Some(v) = val_total {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, snapshot(&model.store, &ids)));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }

    let best_val_loss = best.as_ref().map(|(v, _)| *v);
    if let Some((_, values)) = best {
        for (&id, v) in ids.iter().zip(values) {
            model.store.assign(id, v)?;
        }
    }
    Ok(TrainOutcome { history, epochs_run, best_val_loss, stopped_early, rng: RngState::capture(cfg.seed, rng) })
}

/// Trains encoder-side tensors on the forecasting loss alone.
pub fn pretrain_encoder(model: &mut LtsmDiff, train: &[WindowPair], val: &[WindowPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let epochs = if cfg.pretrain_epochs > 0 { cfg.pretrain_epochs } else { cfg.max_epochs };
    run_phase(model, train, val, cfg, Phase::Pretrain, FinetuneScope::All, epochs, &mut rng)
}

/// Trains every trainable tensor on `L_llm + λ · L_diff`, with early
/// stopping on the validation total.
pub fn train_joint(model: &mut LtsmDiff, train: &[WindowPair], val: &[WindowPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run_phase(model, train, val, cfg, Phase::Joint, FinetuneScope::All, cfg.max_epochs, &mut rng)
}

/// Optional encoder pretraining followed by joint training.
pub fn train(model: &mut LtsmDiff, train: &[WindowPair], val: &[WindowPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let mut epochs = 0;
    if cfg.pretrain_epochs > 0 {
        let pre = run_phase(model, train, val, cfg, Phase::Pretrain, FinetuneScope::All, cfg.pretrain_epochs, &mut rng)?;
        epochs += pre.epochs_run;
        history.extend(pre.history);
    }
    let joint = run_phase(model, train, val, cfg, Phase::Joint, FinetuneScope::All, cfg.max_epochs, &mut rng)?;
    history.extend(joint.history);
    Ok(TrainOutcome { history, epochs_run: epochs + joint.epochs_run, ..joint })
}

/// Result of one few-shot fine-tuning run.
#[derive(Clone, Debug)]
pub struct FewShotResult {
    pub model: LtsmDiff,
    pub outcome: TrainOutcome,
    pub train_windows: usize,
    /// Tensors re-initialized because the channel count changed.
    pub reinitialized: Vec<String>,
    pub report: MetricReport,
}

/// Adapts a source model to target data: keeps the first
/// `max(1, ⌊ratio·N⌋)` target training windows, fine-tunes, and evaluates on
/// the full target test split. With a different channel count the
/// `d`-shaped projections are re-initialized when `reproject` is set.
pub fn fine_tune_fewshot(
    source: &LtsmDiff,
    target: &PreparedData,
    ratio: f64,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    reproject: bool,
) -> Result<FewShotResult> {
    let subset = subsample_fewshot(&target.train, ratio)?;
    let d = target.channels();
    let (mut model, reinitialized) = if d == source.channels() {
        (source.clone(), Vec::new())
    } else if reproject {
        let mut config: ModelConfig = source.config;
        config.encoder.channels = d;
        source.rebuild_for(config)?
    } else {
        return Err(Error::Config(format!(
            "target has {d} channels, source model {}; enable re-projection to transfer",
            source.channels()
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome = run_phase(&mut model, &subset, &target.val, cfg, Phase::Joint, cfg.finetune_scope, cfg.max_epochs, &mut rng)?;
    let variant = if model.has_denoiser() { Variant::LtsmPlusDiffusion } else { Variant::LtsmOnly };
    let forecaster = ModelForecaster { model: &model, sampler: *sampler, variant };
    let report = evaluate(&forecaster, &target.test, &[model.horizon()])?;
    Ok(FewShotResult { train_windows: subset.len(), model, outcome, reinitialized, report })
}
