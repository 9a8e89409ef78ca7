//! Point metrics, horizon-averaged reports, the few-shot transfer grid and
//! the ablation harness.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{window_set_hash, PreparedData, WindowPair};
use crate::error::{config_err, Error, Result};
use crate::model::{LtsmDiff, ModelConfig};
use crate::sampling::{forecast_with_uncertainty, SamplerConfig};
use crate::tensor::Matrix;
use crate::training::{fine_tune_fewshot, train, TrainConfig};

pub fn mse(pred: &Matrix, target: &Matrix) -> Result<f64> {
    Ok(pred.sub(target)?.sum_squares() / target.len().max(1) as f64)
}

pub fn mae(pred: &Matrix, target: &Matrix) -> Result<f64> {
    let d = pred.sub(target)?;
    Ok(d.as_slice().iter().map(|v| libm::fabs(*v)).sum::<f64>() / target.len().max(1) as f64)
}

/// Produces a point forecast for a normalized context.
pub trait Forecaster {
    fn horizon(&self) -> usize;
    /// `item` identifies the window so stochastic forecasters can derive
    /// independent, order-free random streams.
    fn forecast(&self, context: &Matrix, item: u64) -> Result<Matrix>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LtsmOnly,
    LtsmPlusDiffusion,
    AutoformerPlusDiffusion,
    RagPlusDiffusion,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::LtsmOnly => "ltsm_only",
            Variant::LtsmPlusDiffusion => "ltsm_plus_diffusion",
            Variant::AutoformerPlusDiffusion => "autoformer_plus_diffusion",
            Variant::RagPlusDiffusion => "rag_plus_diffusion",
        }
    }

    pub fn implemented(self) -> bool {
        matches!(self, Variant::LtsmOnly | Variant::LtsmPlusDiffusion)
    }
}

/// A trained model used as a forecaster: the encoder head for
/// `LtsmOnly`, the ensemble mean of conditional samples otherwise.
pub struct ModelForecaster<'m> {
    pub model: &'m LtsmDiff,
    pub sampler: SamplerConfig,
    pub variant: Variant,
}

impl Forecaster for ModelForecaster<'_> {
    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn forecast(&self, context: &Matrix, item: u64) -> Result<Matrix> {
        match self.variant {
            Variant::LtsmOnly => self.model.encoder_forecast(context),
            Variant::LtsmPlusDiffusion => Ok(forecast_with_uncertainty(self.model, context, &self.sampler, None, item)?.mean),
            v => Err(Error::Config(format!("variant {} is not implemented", v.label()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_horizon: Vec<HorizonMetrics>,
    pub avg_mse: f64,
    pub avg_mae: f64,
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricReport {
    pub fn from_entries(per_horizon: Vec<HorizonMetrics>) -> Result<Self> {
        if per_horizon.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one horizon".into()));
        }
        let n = per_horizon.len() as f64;
        let avg_mse = per_horizon.iter().map(|h| h.mse).sum::<f64>() / n;
        let avg_mae = per_horizon.iter().map(|h| h.mae).sum::<f64>() / n;
        Ok(Self { per_horizon, avg_mse, avg_mae, dataset: String::new(), config_hash: String::new(), seed: 0 })
    }

    /// Joins reports of per-horizon models into one averaged report.
    pub fn merge(reports: &[MetricReport]) -> Result<Self> {
        let entries = reports.iter().flat_map(|r| r.per_horizon.iter().copied()).collect();
        let mut out = Self::from_entries(entries)?;
        if let Some(first) = reports.first() {
            out.dataset = first.dataset.clone();
            out.config_hash = first.config_hash.clone();
            out.seed = first.seed;
        }
        Ok(out)
    }

    pub fn with_meta(mut self, dataset: impl Into<String>, config_hash: impl Into<String>, seed: u64) -> Self {
        self.dataset = dataset.into();
        self.config_hash = config_hash.into();
        self.seed = seed;
        self
    }
}

/// MSE/MAE over every test window for each requested horizon, using the
/// first `h` forecast steps.
pub fn evaluate<F: Forecaster + ?Sized>(forecaster: &F, test: &[WindowPair], horizons: &[usize]) -> Result<MetricReport> {
    if horizons.is_empty() {
        return Err(Error::InvalidArgument("no horizons requested".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let max_h = forecaster.horizon();
    for &h in horizons {
        if h == 0 || h > max_h {
            return Err(Error::InvalidArgument(format!("horizon {h} outside 1..={max_h}")));
        }
    }
    let mut sq = alloc::vec![0.0; horizons.len()];
    let mut abs = alloc::vec![0.0; horizons.len()];
    let mut counts = alloc::vec![0usize; horizons.len()];
    for (i, w) in test.iter().enumerate() {
        let pred = forecaster.forecast(&w.context, i as u64)?;
        if pred.cols() != w.target.cols() {
            return Err(Error::Shape(format!("forecast has {} channels, target {}", pred.cols(), w.target.cols())));
        }
        for (k, &h) in horizons.iter().enumerate() {
            if w.target.rows() < h {
                return Err(Error::InvalidArgument(format!("window target shorter than horizon {h}")));
            }
            let p = pred.slice_rows(0, h)?;
            let t = w.target.slice_rows(0, h)?;
            let n = t.len();
            sq[k] += mse(&p, &t)? * n as f64;
            abs[k] += mae(&p, &t)? * n as f64;
            counts[k] += n;
        }
    }
    let entries = horizons
        .iter()
        .enumerate()
        .map(|(k, &h)| HorizonMetrics { horizon: h, mse: sq[k] / counts[k] as f64, mae: abs[k] / counts[k] as f64 })
        .collect();
    MetricReport::from_entries(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub ratio: f64,
    pub train_windows: usize,
    pub epochs_run: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    pub rows: Vec<TransferRow>,
    pub reinitialized: Vec<String>,
}

/// Fine-tunes a copy of `source` on each few-shot ratio of `target` and
/// evaluates on the full target test split.
pub fn run_transfer(
    source: &LtsmDiff,
    target: &PreparedData,
    ratios: &[f64],
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    reproject: bool,
) -> Result<TransferTable> {
    if ratios.is_empty() {
        return Err(config_err("transfer needs at least one ratio"));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    let mut reinitialized = Vec::new();
    for &ratio in ratios {
        let r = fine_tune_fewshot(source, target, ratio, cfg, sampler, reproject)?;
        reinitialized = r.reinitialized;
        rows.push(TransferRow { ratio, train_windows: r.train_windows, epochs_run: r.outcome.epochs_run, report: r.report });
    }
    Ok(TransferTable { rows, reinitialized })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub layer_sweep: Vec<usize>,
    /// Joint-loss weights to compare on the full model; empty skips the sweep.
    pub lambda_sweep: Vec<f64>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self { variants: alloc::vec![Variant::LtsmOnly, Variant::LtsmPlusDiffusion], layer_sweep: alloc::vec![1, 3, 6, 9, 12], lambda_sweep: Vec::new() }
    }
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() && self.layer_sweep.is_empty() && self.lambda_sweep.is_empty() {
            return Err(config_err("ablation plan is empty"));
        }
        if let Some(&k) = self.layer_sweep.iter().find(|&&k| k == 0 || k > 12) {
            return Err(config_err(format!("layer count {k} outside 1..=12")));
        }
        if self.lambda_sweep.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(config_err("lambda_sweep values must be non-negative"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        self.variants
            .iter()
            .map(|&v| AblationCell::Variant(v))
            .chain(self.layer_sweep.iter().map(|&k| AblationCell::Layers(k)))
            .chain(self.lambda_sweep.iter().map(|&l| AblationCell::Lambda(l)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCell {
    Variant(Variant),
    Layers(usize),
    Lambda(f64),
}

impl AblationCell {
    pub fn label(&self) -> String {
        match self {
            AblationCell::Variant(v) => v.label().into(),
            AblationCell::Layers(k) => format!("layers_{k}"),
            AblationCell::Lambda(l) => format!("lambda_{l}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Unimplemented,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataHashes {
    pub train: u64,
    pub val: u64,
    pub test: u64,
}

impl DataHashes {
    pub fn of(data: &PreparedData) -> Self {
        Self { train: window_set_hash(&data.train), val: window_set_hash(&data.val), test: window_set_hash(&data.test) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub label: String,
    pub status: CellStatus,
    pub denoiser_constructed: bool,
    pub trainable_params: usize,
    pub data: DataHashes,
    pub report: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variant_rows: Vec<AblationRow>,
    pub layer_rows: Vec<AblationRow>,
    pub lambda_rows: Vec<AblationRow>,
}

/// Trains and evaluates one ablation cell. `on_build` sees the model right
/// after construction.
pub fn run_ablation_cell(
    cell: AblationCell,
    data: &PreparedData,
    base: &ModelConfig,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    on_build: &mut dyn FnMut(&LtsmDiff),
) -> Result<AblationRow> {
    let hashes = DataHashes::of(data);
    let mut config = *base;
    let mut cfg = *cfg;
    let variant = match cell {
        AblationCell::Variant(v) if !v.implemented() => {
            return Ok(AblationRow {
                cell,
                label: cell.label(),
                status: CellStatus::Unimplemented,
                denoiser_constructed: false,
                trainable_params: 0,
                data: hashes,
                report: None,
            });
        }
        AblationCell::Variant(v) => {
            config.use_diffusion = v == Variant::LtsmPlusDiffusion;
            v
        }
        AblationCell::Layers(k) => {
            config.encoder.n_blocks = k;
            config.use_diffusion = true;
            Variant::LtsmPlusDiffusion
        }
        AblationCell::Lambda(l) => {
            config.use_diffusion = true;
            cfg.lambda = l;
            Variant::LtsmPlusDiffusion
        }
    };
    let mut model = LtsmDiff::new(config)?;
    on_build(&model);
    train(&mut model, &data.train, &data.val, &cfg)?;
    let forecaster = ModelForecaster { model: &model, sampler: *sampler, variant };
    let report = evaluate(&forecaster, &data.test, &[model.horizon()])?;
    Ok(AblationRow {
        cell,
        label: cell.label(),
        status: CellStatus::Completed,
        denoiser_constructed: model.has_denoiser(),
        trainable_params: model.store.count_where(|e| e.kind.is_trainable()),
        data: hashes,
        report: Some(report),
    })
}

pub fn run_ablation(
    plan: &AblationPlan,
    data: &PreparedData,
    base: &ModelConfig,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<AblationTable> {
    plan.validate()?;
    let mut rows = Vec::new();
    for cell in plan.cells() {
        rows.push(run_ablation_cell(cell, data, base, cfg, sampler, &mut |_| {})?);
    }
    Ok(AblationTable::from_rows(rows))
}

impl AblationTable {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut table = Self { variant_rows: Vec::new(), layer_rows: Vec::new(), lambda_rows: Vec::new() };
        for r in rows {
            match r.cell {
                AblationCell::Variant(_) => table.variant_rows.push(r),
                AblationCell::Layers(_) => table.layer_rows.push(r),
                AblationCell::Lambda(_) => table.lambda_rows.push(r),
            }
        }
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Oracle {
        offset: f64,
        windows: Vec<WindowPair>,
    }

    impl Forecaster for Oracle {
        fn horizon(&self) -> usize {
            self.windows[0].horizon()
        }

        fn forecast(&self, _: &Matrix, item: u64) -> Result<Matrix> {
            Ok(self.windows[item as usize].target.map(|v| v + self.offset))
        }
    }

    fn windows() -> Vec<WindowPair> {
        (0..4)
            .map(|i| WindowPair {
                start: i,
                context: Matrix::filled(3, 2, i as f64),
                target: Matrix::from_fn(4, 2, |r, c| (i + r + c) as f64 * 0.1),
            })
            .collect()
    }

    #[test]
    fn metric_examples() {
        let y = Matrix::from_rows(&[[1.0, 1.0]]);
        assert_eq!((mse(&y, &y).unwrap(), mae(&y, &y).unwrap()), (0.0, 0.0));
        let z = Matrix::from_rows(&[[0.0, 0.0]]);
        assert_eq!((mse(&z, &y).unwrap(), mae(&z, &y).unwrap()), (1.0, 1.0));
        let p = Matrix::from_rows(&[[0.0, 2.0]]);
        assert_eq!((mse(&p, &y).unwrap(), mae(&p, &y).unwrap()), (1.0, 1.0));
        assert!(mse(&Matrix::zeros(1, 3), &y).is_err());
    }

    #[test]
    fn stub_forecasters() {
        let ws = windows();
        let exact = Oracle { offset: 0.0, windows: ws.clone() };
        let r = evaluate(&exact, &ws, &[2, 4]).unwrap();
        assert!(r.per_horizon.iter().all(|h| h.mse == 0.0 && h.mae == 0.0));
        let shifted = Oracle { offset: 1.0, windows: ws.clone() };
        let r = evaluate(&shifted, &ws, &[1, 2, 4]).unwrap();
        for h in &r.per_horizon {
            assert!((h.mse - 1.0).abs() < 1e-12 && (h.mae - 1.0).abs() < 1e-12);
        }
        let single = evaluate(&shifted, &ws, &[3]).unwrap();
        assert_eq!((single.avg_mse, single.avg_mae), (single.per_horizon[0].mse, single.per_horizon[0].mae));
        assert!(evaluate(&shifted, &ws, &[5]).is_err());
        assert!(evaluate(&shifted, &ws, &[]).is_err());
        assert!(evaluate(&shifted, &[], &[1]).is_err());
    }

    #[test]
    fn merge_averages_per_horizon_models() {
        let a = MetricReport::from_entries(alloc::vec![HorizonMetrics { horizon: 96, mse: 0.2, mae: 0.3 }]).unwrap();
        let b = MetricReport::from_entries(alloc::vec![HorizonMetrics { horizon: 192, mse: 0.4, mae: 0.5 }]).unwrap();
        let m = MetricReport::merge(&[a, b]).unwrap();
        assert_eq!(m.per_horizon.len(), 2);
        assert!((m.avg_mse - 0.3).abs() < 1e-12);
        assert!((m.avg_mae - 0.4).abs() < 1e-12);
    }

    #[test]
    fn plan_shapes() {
        let plan = AblationPlan::default();
        let cells = plan.cells();
        assert_eq!(cells.len(), 7);
        assert_eq!(cells.iter().filter(|c| matches!(c, AblationCell::Layers(_))).count(), 5);
        let empty = AblationPlan { variants: alloc::vec![], layer_sweep: alloc::vec![], lambda_sweep: alloc::vec![] };
        assert!(empty.validate().is_err());
        assert!(AblationPlan { layer_sweep: alloc::vec![13], ..empty.clone() }.validate().is_err());
        let lambdas = AblationPlan { lambda_sweep: alloc::vec![0.1, 1.0, 10.0], ..empty };
        assert_eq!(lambdas.cells().len(), 3);
    }

    proptest! {
        #[test]
        fn mae_bounded_by_rmse(a in proptest::collection::vec(-10.0f64..10.0, 12), b in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let p = Matrix::from_vec(3, 4, a).unwrap();
            let t = Matrix::from_vec(3, 4, b).unwrap();
            let (m2, m1) = (mse(&p, &t).unwrap(), mae(&p, &t).unwrap());
            prop_assert!(m1 >= 0.0 && m2 >= 0.0);
            prop_assert!(m1 <= m2.sqrt() + 1e-12);
        }

        #[test]
        fn average_is_arithmetic_mean(vals in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..6)) {
            let entries: Vec<_> = vals.iter().enumerate().map(|(i, &(m, a))| HorizonMetrics { horizon: i + 1, mse: m, mae: a }).collect();
            let r = MetricReport::from_entries(entries).unwrap();
            let mean = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
            prop_assert!((r.avg_mse - mean).abs() < 1e-12);
        }
    }
}
