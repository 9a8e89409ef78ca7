//! The `train`, `forecast`, `evaluate`, `transfer` and `ablate` commands.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use ltsm_diff_core::data::{prepare, NormStats, PreparedData, WindowPair};
use ltsm_diff_core::evaluation::{
    evaluate, run_ablation_cell, AblationTable, Forecaster, MetricReport, TransferRow, TransferTable, Variant,
};
use ltsm_diff_core::training::{fine_tune_fewshot, train, Checkpoint};
use ltsm_diff_core::LtsmDiff;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::checkpoint::{self, Saved};
use crate::config::{resolve_seed, RunConfig};
use crate::csv_io;
use crate::error::{AppError, Result};
use crate::parallel::{ensemble_forecast, par_map, EnsembleForecaster};
use crate::report;

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub seed: Option<u64>,
    /// Exact output directory instead of a fresh timestamped one.
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Config file (or defaults), then overrides, then seed and job count,
/// validated.
pub fn resolve_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&common.overrides)?;
    if let Some(seed) = resolve_seed(common.seed, cfg.seed)? {
        cfg.apply_seed(seed);
    }
    if let Some(j) = common.jobs {
        cfg.output.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory of one command invocation; [`RunDir::finish`] writes
/// `MANIFEST.json` listing every file with its SHA-256.
pub struct RunDir {
    pub path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &str, explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = Utc::now().format("%Y%m%dT%H%M%S");
                let base = cfg.output.dir.join(format!("{command}-{stamp}-{}", cfg.hash()?));
                let mut p = base.clone();
                let mut k = 1;
                while p.exists() {
                    p = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                p
            }
        };
        fs::create_dir_all(&path).map_err(|e| AppError::io(&path, e))?;
        Ok(Self { path, files: Vec::new() })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.path.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).map_err(|e| AppError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let mut entries = Vec::new();
        for name in &self.files {
            let p = self.path.join(name);
            let bytes = fs::read(&p).map_err(|e| AppError::io(&p, e))?;
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            entries.push(json!({ "name": name, "bytes": bytes.len(), "sha256": digest }));
        }
        let manifest = json!({
            "command": command,
            "created": Utc::now().to_rfc3339(),
            "config_hash": cfg.hash()?,
            "seed": cfg.seed,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "files": entries,
        });
        self.files.clear();
        self.write_json("MANIFEST.json", &manifest)?;
        Ok(self.path)
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn required_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| AppError::Usage(format!("`{key}` is not set; pass --{key} <path> or set it in the config")))
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Loads and windows a dataset for a model of the given lookback/horizon.
pub fn load_data(cfg: &RunConfig, path: &Path, lookback: usize, horizon: usize) -> Result<(PreparedData, Vec<String>)> {
    let series = csv_io::load_csv(path, &cfg.data.date_column)?;
    let data = prepare(&series, lookback, horizon, cfg.data.stride, &cfg.split).map_err(|e| match e {
        ltsm_diff_core::Error::InvalidArgument(m) => AppError::Data(format!("{}: {m}", path.display())),
        e => e.into(),
    })?;
    warn_all(&data.warnings);
    Ok((data, series.channel_names().to_vec()))
}

/// Builds a model, optionally loading backbone weights.
pub fn build_model(cfg: &RunConfig, channels: usize) -> Result<LtsmDiff> {
    let mut mc = cfg.model_config();
    mc.encoder.channels = channels;
    let mut model = LtsmDiff::new(mc)?;
    if let Some(p) = &cfg.backbone.path {
        let tensors = checkpoint::backbone_from_archive(&Archive::load(p)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed ^ 0xB0B);
        let encoder = model.encoder.clone();
        encoder.load_backbone_weights(&mut model.store, &tensors, &mut rng)?;
    }
    Ok(model)
}

fn report_meta(r: MetricReport, dataset: &str, cfg: &RunConfig) -> Result<MetricReport> {
    Ok(r.with_meta(dataset, cfg.hash()?, cfg.seed.unwrap_or(cfg.train.seed)))
}

fn variant_of(model: &LtsmDiff) -> Variant {
    if model.has_denoiser() {
        Variant::LtsmPlusDiffusion
    } else {
        Variant::LtsmOnly
    }
}

/// Test-split metrics, in data units when `metrics_on_normalized` is off.
pub fn evaluate_model(cfg: &RunConfig, model: &LtsmDiff, data: &PreparedData, horizons: &[usize]) -> Result<MetricReport> {
    let in_units = !cfg.data.metrics_on_normalized;
    let forecaster = EnsembleForecaster {
        model,
        sampler: cfg.sampler,
        variant: variant_of(model),
        jobs: cfg.output.jobs,
        output_stats: in_units.then(|| data.stats.clone()),
    };
    let windows: Vec<WindowPair> = if in_units {
        data.test
            .iter()
            .map(|w| Ok(WindowPair { target: data.stats.denormalize(&w.target)?, ..w.clone() }))
            .collect::<Result<_>>()?
    } else {
        data.test.clone()
    };
    Ok(evaluate(&forecaster as &dyn Forecaster, &windows, horizons)?)
}

pub fn cmd_train(common: &Common) -> Result<PathBuf> {
    let mut cfg = resolve_config(common, None)?;
    let path = required_path(&cfg.data.path, "data.path")?;
    let (data, channels) = load_data(&cfg, path, cfg.encoder.lookback, cfg.encoder.horizon)?;
    cfg.encoder.channels = data.channels();
    let mut model = build_model(&cfg, data.channels())?;
    let outcome = train(&mut model, &data.train, &data.val, &cfg.train)?;

    let mut dir = RunDir::create(&cfg, "train", common.out.as_deref())?;
    let saved = Saved {
        checkpoint: Checkpoint::new(model, data.stats.clone(), &outcome),
        channels,
        run_config: Some(serde_json::to_value(cfg.to_flat()?)?),
    };
    checkpoint::save(&dir.file("checkpoint.ltsm"), &saved)?;
    csv_io::write_step_history(&dir.file("loss_history.csv"), &outcome.history)?;
    csv_io::write_epoch_history(&dir.file("epoch_history.csv"), &outcome.history)?;
    dir.write_text("resolved_config.json", &(cfg.to_flat_json()? + "\n"))?;
    dir.write_json(
        "summary.json",
        &json!({
            "epochs_run": outcome.epochs_run,
            "stopped_early": outcome.stopped_early,
            "best_val_loss": outcome.best_val_loss,
            "train_windows": data.train.len(),
            "val_windows": data.val.len(),
            "test_windows": data.test.len(),
            "warnings": data.warnings,
        }),
    )?;
    let out = dir.finish("train", &cfg)?;
    println!(
        "trained {} epochs ({} steps); best validation loss {}",
        outcome.epochs_run,
        outcome.history.steps.len(),
        outcome.best_val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
    );
    println!("{}", out.display());
    Ok(out)
}

/// Config of the run that wrote `saved`, so sampler settings carry over.
fn config_from_checkpoint(saved: &Saved) -> Result<Option<RunConfig>> {
    match &saved.run_config {
        Some(Value::Object(map)) => Ok(Some(RunConfig::from_flat(map.iter().map(|(k, v)| (k.as_str(), v.clone())))?)),
        _ => Ok(None),
    }
}

pub fn cmd_forecast(common: &Common, checkpoint_path: &Path, input: &Path, trace: bool) -> Result<PathBuf> {
    let saved = checkpoint::load(checkpoint_path)?;
    let cfg = resolve_config(common, config_from_checkpoint(&saved)?)?;
    let model = &saved.checkpoint.model;
    let series = csv_io::load_csv(input, &cfg.data.date_column)?;
    if series.channels() != model.channels() {
        return Err(AppError::Data(format!(
            "{} has {} channels, the model was trained on {} ({})",
            input.display(),
            series.channels(),
            model.channels(),
            saved.channels.join(", ")
        )));
    }
    let t = model.lookback();
    if series.len() < t {
        return Err(AppError::Data(format!(
            "insufficient context: {} has {} rows, the model needs {t}",
            input.display(),
            series.len()
        )));
    }
    let stats: &NormStats = &saved.checkpoint.stats;
    let context = stats.normalize(&series.values().slice_rows(series.len() - t, t)?)?;
    if !model.has_denoiser() {
        return Err(AppError::Usage("checkpoint has no denoiser; forecasts need the diffusion model".into()));
    }
    let f = ensemble_forecast(model, &context, &cfg.sampler, Some(stats), 0, cfg.output.jobs, trace)?;

    let mut dir = RunDir::create(&cfg, "forecast", common.out.as_deref())?;
    let names = &saved.channels;
    csv_io::write_forecast(&dir.file("forecast.csv"), names, &f.mean, &f.trace.band_low, &f.trace.band_high)?;
    if trace {
        csv_io::write_trace(&dir.file("trace.csv"), names, &f.trace)?;
        let rows = |m: &ltsm_diff_core::Matrix| -> Vec<Vec<f64>> { (0..m.rows()).map(|r| m.row(r).to_vec()).collect() };
        dir.write_json(
            "trace.json",
            &json!({
                "seed": cfg.sampler.seed,
                "sampler": cfg.sampler,
                "config_hash": cfg.hash()?,
                "channels": names,
                "steps": f.trace.intermediates.len(),
                "band_quantiles": [0.05, 0.95],
                "band_low": rows(&f.trace.band_low),
                "band_high": rows(&f.trace.band_high),
                "mean": rows(&f.mean),
                "initial_ltsm_forecast": rows(&f.trace.initial_ltsm_forecast),
            }),
        )?;
    }
    dir.write_text("resolved_config.json", &(cfg.to_flat_json()? + "\n"))?;
    let out = dir.finish("forecast", &cfg)?;
    println!("{}", out.display());
    Ok(out)
}

pub fn cmd_evaluate(common: &Common, checkpoint_path: Option<&Path>) -> Result<PathBuf> {
    let (cfg, report) = match checkpoint_path {
        Some(p) => {
            let saved = checkpoint::load(p)?;
            let cfg = resolve_config(common, config_from_checkpoint(&saved)?)?;
            let model = &saved.checkpoint.model;
            let path = required_path(&cfg.data.path, "data.path")?;
            let (data, _) = load_data(&cfg, path, model.lookback(), model.horizon())?;
            let horizons = if cfg.eval.horizons.is_empty() { vec![model.horizon()] } else { cfg.eval.horizons.clone() };
            let r = evaluate_model(&cfg, model, &data, &horizons)?;
            let r = report_meta(r, &dataset_name(path), &cfg)?;
            (cfg, r)
        }
        None => {
            let cfg = resolve_config(common, None)?;
            let path = required_path(&cfg.data.path, "data.path")?;
            let horizons = if cfg.eval.horizons.is_empty() { vec![cfg.encoder.horizon] } else { cfg.eval.horizons.clone() };
            // one model per horizon
            let mut reports = Vec::new();
            for &h in &horizons {
                let mut c = cfg.clone();
                c.encoder.horizon = h;
                let (data, _) = load_data(&c, path, c.encoder.lookback, h)?;
                let mut model = build_model(&c, data.channels())?;
                train(&mut model, &data.train, &data.val, &c.train)?;
                reports.push(evaluate_model(&c, &model, &data, &[h])?);
            }
            let r = report_meta(MetricReport::merge(&reports)?, &dataset_name(path), &cfg)?;
            (cfg, r)
        }
    };
    let mut dir = RunDir::create(&cfg, "evaluate", common.out.as_deref())?;
    dir.write_json("report.json", &report)?;
    let text = report::metric_report(&report);
    dir.write_text("report.txt", &text)?;
    dir.write_text("resolved_config.json", &(cfg.to_flat_json()? + "\n"))?;
    let out = dir.finish("evaluate", &cfg)?;
    print!("{text}");
    println!("{}", out.display());
    Ok(out)
}

pub fn cmd_transfer(common: &Common, checkpoint_path: Option<&Path>) -> Result<PathBuf> {
    let cfg = resolve_config(common, None)?;
    if cfg.transfer.ratios.is_empty() {
        return Err(AppError::Config("transfer.ratios is empty".into()));
    }
    let target_path = required_path(&cfg.data.target_path, "data.target_path")?;
    let source_ckpt = checkpoint_path.map(Path::to_path_buf).or_else(|| cfg.transfer.source_checkpoint.clone());
    let source = match source_ckpt {
        Some(p) => checkpoint::load(&p)?.checkpoint.model,
        None => {
            let path = required_path(&cfg.data.path, "data.path")?;
            let (data, _) = load_data(&cfg, path, cfg.encoder.lookback, cfg.encoder.horizon)?;
            let mut model = build_model(&cfg, data.channels())?;
            train(&mut model, &data.train, &data.val, &cfg.train)?;
            model
        }
    };
    let (target, _) = load_data(&cfg, target_path, source.lookback(), source.horizon())?;
    let results = par_map(cfg.output.jobs, &cfg.transfer.ratios, |_, &ratio| {
        fine_tune_fewshot(&source, &target, ratio, &cfg.train, &cfg.sampler, cfg.transfer.reproject)
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut reinitialized = Vec::new();
    for (r, &ratio) in results.into_iter().zip(&cfg.transfer.ratios) {
        let r = r?;
        reinitialized = r.reinitialized;
        rows.push(TransferRow { ratio, train_windows: r.train_windows, epochs_run: r.outcome.epochs_run, report: r.report });
    }
    let dataset = dataset_name(target_path);
    for row in &mut rows {
        row.report = report_meta(row.report.clone(), &dataset, &cfg)?;
    }
    let table = TransferTable { rows, reinitialized };
    let meta = report_meta(table.rows[0].report.clone(), &dataset, &cfg)?;

    let mut dir = RunDir::create(&cfg, "transfer", common.out.as_deref())?;
    dir.write_json("transfer.json", &table)?;
    let text = report::transfer_table(&table, &meta);
    dir.write_text("transfer.txt", &text)?;
    dir.write_text("resolved_config.json", &(cfg.to_flat_json()? + "\n"))?;
    let out = dir.finish("transfer", &cfg)?;
    print!("{text}");
    println!("{}", out.display());
    Ok(out)
}

pub fn cmd_ablate(common: &Common) -> Result<PathBuf> {
    let cfg = resolve_config(common, None)?;
    cfg.ablation.validate().map_err(|e| AppError::Config(e.to_string()))?;
    let path = required_path(&cfg.data.path, "data.path")?;
    let (data, _) = load_data(&cfg, path, cfg.encoder.lookback, cfg.encoder.horizon)?;
    let mut base = cfg.model_config();
    base.encoder.channels = data.channels();
    let cells = cfg.ablation.cells();
    let results = par_map(cfg.output.jobs, &cells, |_, &cell| {
        run_ablation_cell(cell, &data, &base, &cfg.train, &cfg.sampler, &mut |_| {})
    });
    let dataset = dataset_name(path);
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let mut row = r?;
        if let Some(rep) = row.report.take() {
            row.report = Some(report_meta(rep, &dataset, &cfg)?);
        }
        rows.push(row);
    }
    let table = AblationTable::from_rows(rows);
    let meta = report_meta(
        MetricReport::from_entries(vec![ltsm_diff_core::evaluation::HorizonMetrics {
            horizon: cfg.encoder.horizon,
            mse: 0.0,
            mae: 0.0,
        }])?,
        &dataset,
        &cfg,
    )?;

    let mut dir = RunDir::create(&cfg, "ablate", common.out.as_deref())?;
    dir.write_json("ablation.json", &table)?;
    let text = report::ablation_table(&table, &meta);
    dir.write_text("ablation.txt", &text)?;
    dir.write_text("resolved_config.json", &(cfg.to_flat_json()? + "\n"))?;
    let out = dir.finish("ablate", &cfg)?;
    print!("{text}");
    println!("{}", out.display());
    Ok(out)
}
