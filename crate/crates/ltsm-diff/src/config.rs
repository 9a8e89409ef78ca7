//! Run configuration: one flat JSON object whose dotted keys mirror the
//! module configs (`"encoder.lora.rank": 8`, `"train.lambda": 1.0`), with
//! `--section.key value` overrides on the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ltsm_diff_core::data::SplitSpec;
use ltsm_diff_core::diffusion::DiffusionConfig;
use ltsm_diff_core::encoder::EncoderConfig;
use ltsm_diff_core::evaluation::AblationPlan;
use ltsm_diff_core::sampling::SamplerConfig;
use ltsm_diff_core::training::TrainConfig;
use ltsm_diff_core::uvit::UvitConfig;
use ltsm_diff_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const SEED_ENV: &str = "LTSMDIFF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub date_column: String,
    /// Target dataset of a transfer run.
    pub target_path: Option<PathBuf>,
    pub stride: usize,
    /// Report metrics on z-scored values rather than data units.
    pub metrics_on_normalized: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: None, date_column: "date".into(), target_path: None, stride: 1, metrics_on_normalized: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub use_diffusion: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { use_diffusion: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Tensor archive with `block<i>.*` weights; random frozen init when absent.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Horizons to report; one model per horizon is trained by `evaluate`
    /// without a checkpoint. Empty means the configured horizon only.
    pub horizons: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub ratios: Vec<f64>,
    /// Rebuild the channel-shaped projections when source and target differ in `d`.
    pub reproject: bool,
    pub source_checkpoint: Option<PathBuf>,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { ratios: vec![0.01, 0.05, 0.5, 1.0], reproject: true, source_checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub jobs: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), jobs: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; when set it determines the model, training and sampler
    /// seeds. Falls back to `LTSMDIFF_SEED`.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub split: SplitSpec,
    pub encoder: EncoderConfig,
    pub backbone: BackboneSection,
    pub denoiser: UvitConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub transfer: TransferSection,
    pub ablation: AblationPlan,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            denoiser: self.denoiser,
            diffusion: self.diffusion,
            use_diffusion: self.model.use_diffusion,
            seed: self.train.seed,
        }
    }

    /// Spreads the master seed over the component seeds.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.sampler.seed = seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: ltsm_diff_core::Error| AppError::Config(e.to_string());
        self.model_config().validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.split.validate().map_err(wrap)?;
        self.sampler.validate(&self.diffusion.schedule().map_err(wrap)?).map_err(wrap)?;
        if self.data.stride == 0 {
            return Err(AppError::Config("data.stride must be at least 1".into()));
        }
        if self.output.jobs == 0 {
            return Err(AppError::Config("output.jobs must be at least 1".into()));
        }
        if let Some(&h) = self.eval.horizons.iter().find(|&&h| h == 0) {
            return Err(AppError::Config(format!("eval.horizons contains {h}")));
        }
        if let Some(r) = self.transfer.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(AppError::Config(format!("transfer ratio {r} outside (0, 1]")));
        }
        Ok(())
    }

    /// Flat dotted-key form of every setting.
    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn to_flat_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_flat()?)?)
    }

    /// Builds a config from flat key/value pairs on top of the defaults.
    /// Unknown keys and badly typed values are rejected.
    pub fn from_flat<'a>(pairs: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        let known = Self::default().to_flat()?;
        for (key, value) in pairs {
            if !known.contains_key(key) {
                let hint = known.keys().find(|k| k.ends_with(key.rsplit('.').next().unwrap_or(key)));
                return Err(AppError::Config(match hint {
                    Some(h) => format!("unknown key `{key}` (did you mean `{h}`?)"),
                    None => format!("unknown key `{key}`"),
                }));
            }
            set_path(&mut tree, key, value);
        }
        serde_json::from_value(tree).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| AppError::Config(format!("not valid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(AppError::Config("config must be a JSON object of dotted keys".into()));
        };
        Self::from_flat(map.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies `--section.key value` overrides. A value that parses as JSON
    /// is taken as such; anything else is a string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut flat = self.to_flat()?;
        for (k, raw) in overrides {
            if !flat.contains_key(k) {
                return Err(AppError::Config(format!("unknown override `--{k}`")));
            }
            flat.insert(k.clone(), parse_override(raw));
        }
        Self::from_flat(flat.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// Short SHA-256 of the flat form; identical settings hash identically.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.to_flat()?)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

pub fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Seed precedence: explicit flag, then the config's `seed`, then the
/// environment.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if config.is_some() {
        return Ok(config);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| AppError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node.as_object_mut().expect("object").entry(p.to_string()).or_insert(Value::Object(Map::new()));
    }
    if let Some(map) = node.as_object_mut() {
        map.insert(parts[parts.len() - 1].to_string(), value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.learning_rate, 0.0005);
        assert_eq!((c.train.max_epochs, c.train.patience), (20, 5));
        assert_eq!((c.encoder.n_heads, c.encoder.n_blocks), (4, 6));
        assert_eq!(c.encoder.dropout_p, 0.3);
        assert_eq!((c.encoder.lora.rank, c.encoder.lora.alpha, c.encoder.lora.dropout_p), (8, 32.0, 0.1));
        assert_eq!(c.transfer.ratios, [0.01, 0.05, 0.5, 1.0]);
        c.validate().unwrap();
    }

    #[test]
    fn flat_round_trip() {
        let mut c = RunConfig::default();
        c.train.lambda = 0.25;
        c.encoder.lora.rank = 4;
        c.data.path = Some("x.csv".into());
        let text = c.to_flat_json().unwrap();
        assert!(text.contains("\"encoder.lora.rank\": 4"));
        assert_eq!(RunConfig::from_json_str(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json_str(r#"{"train.lamda": 1}"#).unwrap_err();
        assert!(err.to_string().contains("train.lamda"));
        assert!(RunConfig::from_json_str(r#"{"train": {"lambda": 1}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"train.lambda": "big"}"#).is_err());
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                ("train.lambda".into(), "0".into()),
                ("sampler.kind".into(), "ddim".into()),
                ("data.path".into(), "a/b.csv".into()),
                ("ablation.layer_sweep".into(), "[1,2]".into()),
            ])
            .unwrap();
        assert_eq!(c.train.lambda, 0.0);
        assert_eq!(c.sampler.kind, ltsm_diff_core::sampling::SamplerKind::Ddim);
        assert_eq!(c.data.path.as_deref(), Some(Path::new("a/b.csv")));
        assert_eq!(c.ablation.layer_sweep, [1, 2]);
        assert_eq!(c.to_flat().unwrap()["train.lambda"], json!(0.0));
        assert!(RunConfig::default().with_overrides(&[("nope.x".into(), "1".into())]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.lambda = 2.0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2)).unwrap(), Some(1));
        assert_eq!(resolve_seed(None, Some(2)).unwrap(), Some(2));
    }
}
