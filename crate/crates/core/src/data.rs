//! Multivariate series, normalization, and (context, target) windowing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `L × d` observations with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    timestamps: Vec<i64>,
    values: Matrix,
    channel_names: Vec<String>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<i64>, values: Matrix, channel_names: Vec<String>) -> Result<Self> {
        if timestamps.len() != values.rows() {
            return Err(Error::Shape(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                values.rows()
            )));
        }
        if channel_names.len() != values.cols() {
            return Err(Error::Shape(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                values.cols()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        if let Some(i) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series row {}", i / values.cols().max(1))));
        }
        Ok(Self { timestamps, values, channel_names })
    }

    /// Series with timestamps `0, 1, …` and channels `c0, c1, …`.
    pub fn from_values(values: Matrix) -> Result<Self> {
        let ts = (0..values.rows() as i64).collect();
        let names = (0..values.cols()).map(|i| format!("c{i}")).collect();
        Self::new(ts, values, names)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Keeps only the last `n` rows.
    pub fn tail(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let start = self.len() - n;
        Ok(Self {
            timestamps: self.timestamps[start..].to_vec(),
            values: self.values.slice_rows(start, n)?,
            channel_names: self.channel_names.clone(),
        })
    }
}

/// Per-channel z-score statistics from the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(d: usize) -> Self {
        Self { mean: alloc::vec![0.0; d], std: alloc::vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.mean.len() != d || self.std.len() != d {
            return Err(Error::Shape(format!("stats for {} channels applied to {d}", self.mean.len())));
        }
        Ok(())
    }

    /// `(x - mean) / std` per column.
    pub fn normalize(&self, values: &Matrix) -> Result<Matrix> {
        self.check(values.cols())?;
        Ok(Matrix::from_fn(values.rows(), values.cols(), |r, c| {
            (values.get(r, c) - self.mean[c]) / self.std[c]
        }))
    }

    pub fn denormalize(&self, values: &Matrix) -> Result<Matrix> {
        self.check(values.cols())?;
        Ok(Matrix::from_fn(values.rows(), values.cols(), |r, c| {
            values.get(r, c) * self.std[c] + self.mean[c]
        }))
    }
}

/// Mean and population standard deviation of rows `[0, train_end)`.
/// Zero-variance channels get `std = 1`.
pub fn compute_norm_stats(series: &RawSeries, train_end: usize) -> Result<NormStats> {
    if train_end == 0 || train_end > series.len() {
        return Err(Error::InvalidArgument(format!(
            "train_end {train_end} outside 1..={}",
            series.len()
        )));
    }
    let d = series.channels();
    let v = series.values();
    let n = train_end as f64;
    let mut mean = alloc::vec![0.0; d];
    let mut std = alloc::vec![0.0; d];
    for c in 0..d {
        let m = (0..train_end).map(|r| v.get(r, c)).sum::<f64>() / n;
        let var = (0..train_end).map(|r| (v.get(r, c) - m) * (v.get(r, c) - m)).sum::<f64>() / n;
        mean[c] = m;
        std[c] = if var > 0.0 { libm::sqrt(var) } else { 1.0 };
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(series: &RawSeries, stats: &NormStats) -> Result<RawSeries> {
    Ok(RawSeries {
        timestamps: series.timestamps.clone(),
        values: stats.normalize(&series.values)?,
        channel_names: series.channel_names.clone(),
    })
}

pub fn denormalize(values: &Matrix, stats: &NormStats) -> Result<Matrix> {
    stats.denormalize(values)
}

/// One training example: `T × d` context immediately followed by `H × d` target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// Row of the source series where the context begins.
    pub start: usize,
    pub context: Matrix,
    pub target: Matrix,
}

impl WindowPair {
    pub fn lookback(&self) -> usize {
        self.context.rows()
    }

    pub fn horizon(&self) -> usize {
        self.target.rows()
    }

    /// Source rows covered, as a half-open range.
    pub fn span(&self) -> core::ops::Range<usize> {
        self.start..self.start + self.lookback() + self.horizon()
    }
}

/// Start offsets `0, stride, 2·stride, …` of every complete window.
pub fn window_starts(len: usize, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    if stride == 0 || len < lookback + horizon {
        return Vec::new();
    }
    (0..=len - lookback - horizon).step_by(stride).collect()
}

pub fn make_windows(series: &RawSeries, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<WindowPair>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "lookback {lookback}, horizon {horizon} and stride {stride} must all be ≥ 1"
        )));
    }
    window_starts(series.len(), lookback, horizon, stride)
        .into_iter()
        .map(|start| {
            Ok(WindowPair {
                start,
                context: series.values().slice_rows(start, lookback)?,
                target: series.values().slice_rows(start + lookback, horizon)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub few_shot_ratio: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.7, val_fraction: 0.1, test_fraction: 0.2, few_shot_ratio: 1.0 }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train_fraction: train, val_fraction: val, test_fraction: test, few_shot_ratio: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("split fractions must be non-negative".into()));
        }
        if libm::fabs(f.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {}, not 1", f.iter().sum::<f64>())));
        }
        if !(self.few_shot_ratio > 0.0 && self.few_shot_ratio <= 1.0) {
            return Err(Error::Config(format!("few_shot_ratio {} outside (0, 1]", self.few_shot_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split<W> {
    pub train: Vec<W>,
    pub val: Vec<W>,
    pub test: Vec<W>,
    /// Non-fatal notes, e.g. a split that ended up empty.
    pub warnings: Vec<String>,
}

// floor that tolerates 0.7 * 10 = 7.000000000000001 style noise in both directions
fn proportional(n: usize, fraction: f64) -> usize {
    libm::floor(fraction * n as f64 + 1e-9) as usize
}

/// Partitions time-ordered windows into train/val/test by proportion, then
/// drops every val/test window whose source rows reach back into an earlier
/// split.
pub fn split_chronological(windows: Vec<WindowPair>, spec: &SplitSpec) -> Result<Split<WindowPair>> {
    spec.validate()?;
    let spans: Vec<_> = windows.iter().map(WindowPair::span).collect();
    let idx = split_indices(&spans, spec);
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new(), warnings: idx.warnings };
    for (i, w) in windows.into_iter().enumerate() {
        if idx.train.contains(&i) {
            out.train.push(w);
        } else if idx.val.contains(&i) {
            out.val.push(w);
        } else if idx.test.contains(&i) {
            out.test.push(w);
        }
    }
    Ok(out)
}

/// Index form of [`split_chronological`] over window source spans.
pub fn split_indices(spans: &[core::ops::Range<usize>], spec: &SplitSpec) -> Split<usize> {
    let n = spans.len();
    let n_train = proportional(n, spec.train_fraction).min(n);
    let n_val = proportional(n, spec.val_fraction).min(n - n_train);
    let mut out = Split::default();
    out.train = (0..n_train).collect();
    let mut frontier = out.train.last().map_or(0, |&i| spans[i].end);
    out.val = (n_train..n_train + n_val).filter(|&i| spans[i].start >= frontier).collect();
    if let Some(&i) = out.val.last() {
        frontier = spans[i].end;
    }
    out.test = (n_train + n_val..n).filter(|&i| spans[i].start >= frontier).collect();

    for (name, frac, got) in [
        ("train", spec.train_fraction, out.train.len()),
        ("val", spec.val_fraction, out.val.len()),
        ("test", spec.test_fraction, out.test.len()),
    ] {
        if frac > 0.0 && got == 0 && n > 0 {
            out.warnings.push(format!("{name} split is empty ({n} windows, fraction {frac}, after dropping windows that overlap the previous split)"));
        }
    }
    out
}

/// Chronological prefix of `max(1, floor(ratio · N))` windows.
pub fn subsample_fewshot<W: Clone>(train: &[W], ratio: f64) -> Result<Vec<W>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("few-shot ratio {ratio} outside (0, 1]")));
    }
    let k = proportional(train.len(), ratio).max(1).min(train.len());
    Ok(train[..k].to_vec())
}

/// Windows of a series after train-only normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub stats: NormStats,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
    pub warnings: Vec<String>,
}

impl PreparedData {
    pub fn channels(&self) -> usize {
        self.stats.dim()
    }
}

/// Windows the raw series, splits chronologically, fits normalization on
/// the rows the training windows cover, and materializes normalized windows.
pub fn prepare(series: &RawSeries, lookback: usize, horizon: usize, stride: usize, spec: &SplitSpec) -> Result<PreparedData> {
    spec.validate()?;
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::InvalidArgument("lookback, horizon and stride must be ≥ 1".into()));
    }
    let starts = window_starts(series.len(), lookback, horizon, stride);
    let spans: Vec<_> = starts.iter().map(|&s| s..s + lookback + horizon).collect();
    let idx = split_indices(&spans, spec);
    let train_end = idx
        .train
        .last()
        .map(|&i| spans[i].end)
        .ok_or_else(|| Error::InvalidArgument(format!(
            "series of {} rows yields no training windows for lookback {lookback} + horizon {horizon}",
            series.len()
        )))?;
    let stats = compute_norm_stats(series, train_end)?;
    let norm = normalize(series, &stats)?;
    let take = |ids: &[usize]| -> Result<Vec<WindowPair>> {
        ids.iter()
            .map(|&i| {
                let s = starts[i];
                Ok(WindowPair {
                    start: s,
                    context: norm.values().slice_rows(s, lookback)?,
                    target: norm.values().slice_rows(s + lookback, horizon)?,
                })
            })
            .collect()
    };
    Ok(PreparedData {
        train: take(&idx.train)?,
        val: take(&idx.val)?,
        test: take(&idx.test)?,
        warnings: idx.warnings,
        stats,
    })
}

/// FNV-1a over window offsets and value bits; equal hashes mean
/// bitwise-identical window sets for practical purposes.
pub fn window_set_hash(windows: &[WindowPair]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(windows.len() as u64);
    for w in windows {
        eat(w.start as u64);
        for m in [&w.context, &w.target] {
            eat(m.rows() as u64);
            eat(m.cols() as u64);
            for v in m.as_slice() {
                eat(v.to_bits());
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> RawSeries {
        RawSeries::from_values(Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()).unwrap()
    }

    fn ramp(len: usize, d: usize) -> RawSeries {
        RawSeries::from_values(Matrix::from_fn(len, d, |r, c| (r * d + c) as f64)).unwrap()
    }

    #[test]
    fn norm_stats_examples() {
        let s = compute_norm_stats(&column(&[0.0, 2.0]), 2).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        let s = compute_norm_stats(&column(&[5.0, 5.0, 5.0]), 3).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (5.0, 1.0));
        let s = compute_norm_stats(&column(&[1.0, 2.0, 3.0]), 3).unwrap();
        assert_eq!(s.mean[0], 2.0);
        // population variance: ((1)^2 + 0 + (1)^2) / 3
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std[0] - 0.8165).abs() < 1e-4);
        assert!(compute_norm_stats(&column(&[1.0]), 0).is_err());
    }

    #[test]
    fn stats_use_only_training_rows() {
        let s = compute_norm_stats(&column(&[0.0, 2.0, 100.0]), 2).unwrap();
        assert_eq!(s.mean[0], 1.0);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats { mean: vec![1.0], std: vec![1.0] };
        let n = normalize(&column(&[0.0, 2.0]), &stats).unwrap();
        assert_eq!(n.values().as_slice(), &[-1.0, 1.0]);
        assert!(stats.normalize(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn normalized_rows_have_unit_stats() {
        let s = RawSeries::from_values(Matrix::from_fn(50, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 * (c + 1) as f64)).unwrap();
        let stats = compute_norm_stats(&s, 50).unwrap();
        let again = compute_norm_stats(&normalize(&s, &stats).unwrap(), 50).unwrap();
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-12);
            assert!((again.std[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(make_windows(&ramp(200, 1), 96, 96, 1).unwrap().len(), 9);
        assert!(make_windows(&ramp(191, 1), 96, 96, 1).unwrap().is_empty());
        let w = make_windows(&ramp(10, 1), 3, 2, 2).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 2, 4]);
        assert_eq!(w[1].context.as_slice(), &[2.0, 3.0, 4.0]);
        assert_eq!(w[1].target.as_slice(), &[5.0, 6.0]);
        assert!(make_windows(&ramp(10, 1), 0, 2, 1).is_err());
    }

    #[test]
    fn split_examples() {
        // stride larger than the window span so no straddle removal happens
        let ws = make_windows(&ramp(100, 1), 3, 2, 10).unwrap();
        assert_eq!(ws.len(), 10);
        let s = split_chronological(ws.clone(), &SplitSpec::new(0.6, 0.2, 0.2).unwrap()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = split_chronological(ws, &SplitSpec::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 0, 0));
        assert!(s.warnings.is_empty());
        assert!(SplitSpec::new(0.5, 0.2, 0.2).is_err());
        assert!(SplitSpec::new(1.2, -0.2, 0.0).is_err());
    }

    #[test]
    fn split_never_leaks_rows() {
        let ws = make_windows(&ramp(109, 1), 5, 5, 1).unwrap();
        assert_eq!(ws.len(), 100);
        let s = split_chronological(ws, &SplitSpec::new(0.7, 0.1, 0.2).unwrap()).unwrap();
        // brute force: every retained row of later splits is disjoint from earlier ones
        for later in s.val.iter().chain(&s.test) {
            for w in &s.train {
                assert!(later.span().all(|r| !w.span().contains(&r)));
            }
        }
        for t in &s.test {
            for v in &s.val {
                assert!(t.span().all(|r| !v.span().contains(&r)));
            }
        }
        assert_eq!(s.train.len(), 70);
        assert!(!s.test.is_empty());
    }

    #[test]
    fn empty_split_warns() {
        let ws = make_windows(&ramp(30, 1), 5, 5, 1).unwrap();
        let s = split_chronological(ws, &SplitSpec::new(0.6, 0.2, 0.2).unwrap()).unwrap();
        assert!(s.val.is_empty());
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn fewshot_examples() {
        let v: Vec<usize> = (0..1000).collect();
        assert_eq!(subsample_fewshot(&v, 0.01).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(subsample_fewshot(&v, 1.0).unwrap().len(), 1000);
        let small: Vec<usize> = (0..50).collect();
        assert_eq!(subsample_fewshot(&small, 0.01).unwrap(), vec![0]);
        assert!(subsample_fewshot(&v, 0.0).is_err());
        assert!(subsample_fewshot(&v, 1.5).is_err());
    }

    #[test]
    fn series_validation() {
        assert!(RawSeries::new(vec![1, 1], Matrix::zeros(2, 1), vec!["a".into()]).is_err());
        assert!(RawSeries::new(vec![1, 2], Matrix::filled(2, 1, f64::NAN), vec!["a".into()]).is_err());
        assert!(RawSeries::new(vec![1], Matrix::zeros(2, 1), vec!["a".into()]).is_err());
    }

    #[test]
    fn prepare_fits_stats_on_train_rows() {
        let series = ramp(60, 2);
        let p = prepare(&series, 4, 2, 1, &SplitSpec::new(0.5, 0.25, 0.25).unwrap()).unwrap();
        let train_end = p.train.last().unwrap().span().end;
        let expected = compute_norm_stats(&series, train_end).unwrap();
        assert_eq!(p.stats, expected);
        let raw = make_windows(&series, 4, 2, 1).unwrap();
        let w0 = &p.train[0];
        assert!(expected.denormalize(&w0.context).unwrap().max_abs_diff(&raw[0].context) < 1e-9);
        assert!(prepare(&ramp(5, 1), 4, 2, 1, &SplitSpec::default()).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 1usize..100, t in 1usize..20, h in 1usize..20, stride in 1usize..7) {
            let mut brute = 0;
            let mut s = 0;
            while s + t + h <= len {
                brute += 1;
                s += stride;
            }
            let formula = if len >= t + h { (len - t - h) / stride + 1 } else { 0 };
            prop_assert_eq!(window_starts(len, t, h, stride).len(), brute);
            prop_assert_eq!(formula, brute);
        }

        #[test]
        fn normalize_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 30)) {
            let m = Matrix::from_vec(10, 3, vals).unwrap();
            let s = RawSeries::from_values(m.clone()).unwrap();
            let stats = compute_norm_stats(&s, 10).unwrap();
            let back = stats.denormalize(&stats.normalize(&m).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&m) < 1e-9);
        }

        #[test]
        fn split_is_leak_free(len in 20usize..120, t in 1usize..6, h in 1usize..6, stride in 1usize..4,
                              train in 0.0f64..1.0, val_share in 0.0f64..1.0) {
            let val = (1.0 - train) * val_share;
            let spec = SplitSpec::new(train, val, 1.0 - train - val);
            prop_assume!(spec.is_ok());
            let ws = make_windows(&ramp(len, 1), t, h, stride).unwrap();
            let s = split_chronological(ws, &spec.unwrap()).unwrap();
            for later in s.val.iter().chain(&s.test) {
                for w in &s.train {
                    prop_assert!(later.start >= w.span().end);
                }
            }
        }

        #[test]
        fn fewshot_is_deterministic(n in 1usize..500, ratio in 0.001f64..1.0) {
            let v: Vec<u32> = (0..n as u32).collect();
            let a = subsample_fewshot(&v, ratio).unwrap();
            let b = subsample_fewshot(&v, ratio).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(!a.is_empty());
        }
    }
}
