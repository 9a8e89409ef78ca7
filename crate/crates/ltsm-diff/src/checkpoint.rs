//! Checkpoints: every model tensor plus the noise schedule in a tensor
//! archive, with configs, normalization statistics, RNG state and tensor
//! roles in the JSON metadata.

use std::collections::BTreeMap;
use std::path::Path;

use ltsm_diff_core::diffusion::NoiseSchedule;
use ltsm_diff_core::params::{ParamGroup, ParamKind};
use ltsm_diff_core::training::Checkpoint;
use ltsm_diff_core::{LtsmDiff, Matrix, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::{Archive, Tensor, TensorData};
use crate::error::{AppError, Result};

pub const FORMAT: &str = "ltsm-diff-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Frozen,
    Lora,
    Trainable,
}

impl From<ParamKind> for Role {
    fn from(k: ParamKind) -> Self {
        match k {
            ParamKind::Frozen => Role::Frozen,
            ParamKind::Lora => Role::Lora,
            ParamKind::Trainable => Role::Trainable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub role: Role,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    model: ModelConfig,
    stats: ltsm_diff_core::data::NormStats,
    channels: Vec<String>,
    epoch: usize,
    best_val_loss: Option<f64>,
    rng: ltsm_diff_core::training::RngState,
    tensors: BTreeMap<String, TensorInfo>,
    #[serde(default)]
    run_config: Option<Value>,
}

/// A checkpoint with the context it was written in.
#[derive(Clone, Debug)]
pub struct Saved {
    pub checkpoint: Checkpoint,
    pub channels: Vec<String>,
    /// Resolved run configuration of the run that wrote it, if recorded.
    pub run_config: Option<Value>,
}

pub fn to_archive(saved: &Saved) -> Result<Archive> {
    let ck = &saved.checkpoint;
    let tensors = ck
        .model
        .store
        .entries()
        .iter()
        .map(|e| {
            let group = match e.group {
                ParamGroup::Encoder => "encoder",
                ParamGroup::Denoiser => "denoiser",
            };
            (e.name.clone(), TensorInfo { role: e.kind.into(), group: group.into() })
        })
        .collect();
    let meta = Meta {
        format: FORMAT.into(),
        version: VERSION,
        model: ck.model.config,
        stats: ck.stats.clone(),
        channels: saved.channels.clone(),
        epoch: ck.epoch,
        best_val_loss: ck.best_val_loss,
        rng: ck.rng,
        tensors,
        run_config: saved.run_config.clone(),
    };
    let mut a = Archive::new(serde_json::to_value(meta)?);
    for e in ck.model.store.entries() {
        a.push_matrix(e.name.clone(), &e.value)?;
    }
    let s = &ck.model.schedule;
    let n = s.betas().len() as u64;
    a.push(Tensor::new("schedule.betas", vec![n], TensorData::F64(s.betas().to_vec()))?)?;
    a.push(Tensor::new("schedule.alpha_bars", vec![n + 1], TensorData::F64(s.alpha_bars().to_vec()))?)?;
    Ok(a)
}

pub fn from_archive(a: &Archive) -> Result<Saved> {
    let meta: Meta = serde_json::from_value(a.metadata.clone())
        .map_err(|e| AppError::Archive(format!("checkpoint metadata: {e}")))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(AppError::Archive(format!("unsupported checkpoint {} v{}", meta.format, meta.version)));
    }
    let mut model = LtsmDiff::new(meta.model)?;
    let mut problems = Vec::new();
    for id in model.store.ids().collect::<Vec<_>>() {
        let e = model.store.entry(id);
        let name = e.name.clone();
        let role: Role = e.kind.into();
        match (a.get(&name), meta.tensors.get(&name)) {
            (Some(t), Some(info)) if info.role == role => {
                let m = t.to_matrix()?;
                if m.shape() != e.value.shape() {
                    problems.push(format!("{name} (expected {:?}, got {:?})", e.value.shape(), m.shape()));
                } else {
                    model.store.assign(id, m)?;
                }
            }
            (Some(_), Some(info)) => problems.push(format!("{name} (role {:?}, expected {role:?})", info.role)),
            _ => problems.push(format!("{name} (missing)")),
        }
    }
    let known: Vec<&str> = model.store.entries().iter().map(|e| e.name.as_str()).collect();
    for name in a.names().filter(|n| !n.starts_with("schedule.") && !known.contains(n)) {
        problems.push(format!("{name} (unexpected)"));
    }
    if !problems.is_empty() {
        return Err(AppError::Archive(format!("checkpoint does not match its config: {}", problems.join(", "))));
    }
    let betas = a.matrix("schedule.betas")?;
    model.schedule = NoiseSchedule::from_betas(betas.as_slice().to_vec())?;
    let stored: Matrix = a.matrix("schedule.alpha_bars")?;
    if stored.as_slice() != model.schedule.alpha_bars() {
        return Err(AppError::Archive("stored alpha_bar disagrees with stored betas".into()));
    }
    if meta.stats.dim() != model.channels() || meta.channels.len() != model.channels() {
        return Err(AppError::Archive("normalization stats or channel names do not match the model".into()));
    }
    Ok(Saved {
        checkpoint: Checkpoint { model, stats: meta.stats, epoch: meta.epoch, best_val_loss: meta.best_val_loss, rng: meta.rng },
        channels: meta.channels,
        run_config: meta.run_config,
    })
}

pub fn save(path: &Path, saved: &Saved) -> Result<()> {
    to_archive(saved)?.save(path)
}

pub fn load(path: &Path) -> Result<Saved> {
    from_archive(&Archive::load(path)?)
}

/// Frozen-backbone tensors (`block<i>.*` without adapters) from an archive
/// of named rank-2 tensors, for [`ltsm_diff_core::encoder::Encoder::load_backbone_weights`].
pub fn backbone_from_archive(a: &Archive) -> Result<BTreeMap<String, Matrix>> {
    a.tensors
        .iter()
        .filter(|t| t.name.starts_with("block") && !t.name.contains(".lora_"))
        .map(|t| Ok((t.name.clone(), t.to_matrix()?)))
        .collect()
}

pub fn backbone_to_archive(model: &LtsmDiff) -> Result<Archive> {
    let mut a = Archive::new(serde_json::json!({ "format": "ltsm-diff-backbone", "encoder": model.config.encoder }));
    for e in model.store.entries().iter().filter(|e| e.kind == ParamKind::Frozen) {
        a.push_matrix(e.name.clone(), &e.value)?;
    }
    Ok(a)
}
