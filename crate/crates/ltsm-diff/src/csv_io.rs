//! CSV input (one timestamp column plus numeric channels) and the CSV
//! outputs of the forecast and training commands.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use ltsm_diff_core::data::RawSeries;
use ltsm_diff_core::sampling::DenoiseTrace;
use ltsm_diff_core::training::{History, Phase};
use ltsm_diff_core::Matrix;

use crate::error::{AppError, Result};

const DATETIME_FORMATS: [&str; 6] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
];

/// Seconds since the Unix epoch. Accepts integers (already epoch seconds),
/// RFC 3339, `YYYY-MM-DD[ T]HH:MM[:SS[.f]]` and bare dates. Zone-less
/// values are read as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for f in DATETIME_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)).map(|dt| dt.and_utc().timestamp())
}

pub fn load_csv(path: &Path, date_column: &str) -> Result<RawSeries> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    read_csv(f, date_column, path)
}

/// Parses CSV text; `source` only labels error messages. Rows are sorted by
/// timestamp; data rows are numbered from 1 in messages, in file order.
pub fn read_csv<R: Read>(reader: R, date_column: &str, source: &Path) -> Result<RawSeries> {
    let parse_err = |row: usize, column: &str, message: String| AppError::Parse {
        path: source.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let date_idx = headers
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| AppError::Data(format!("{}: no `{date_column}` column in header {headers:?}", source.display())))?;
    let names: Vec<String> = headers.iter().enumerate().filter(|&(i, _)| i != date_idx).map(|(_, h)| h.clone()).collect();
    if names.is_empty() {
        return Err(AppError::Data(format!("{}: no value columns", source.display())));
    }

    let mut rows: Vec<(i64, usize, Vec<f64>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(parse_err(row, date_column, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[date_idx])
            .ok_or_else(|| parse_err(row, date_column, format!("`{}` is not a timestamp", &rec[date_idx])))?;
        let mut values = Vec::with_capacity(names.len());
        for (j, cell) in rec.iter().enumerate() {
            if j == date_idx {
                continue;
            }
            let column = &headers[j];
            let v: f64 = cell.parse().map_err(|_| parse_err(row, column, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, column, format!("`{cell}` is not finite")));
            }
            values.push(v);
        }
        rows.push((ts, row, values));
    }
    if rows.is_empty() {
        return Err(AppError::Data(format!("{}: no data rows", source.display())));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(AppError::Data(format!(
            "{}: duplicate timestamp {} at rows {} and {}",
            source.display(),
            w[0].0,
            w[0].1.min(w[1].1),
            w[0].1.max(w[1].1)
        )));
    }
    let d = names.len();
    let timestamps = rows.iter().map(|r| r.0).collect();
    let data = rows.into_iter().flat_map(|r| r.2).collect::<Vec<_>>();
    let values = Matrix::from_vec(data.len() / d, d, data)?;
    Ok(RawSeries::new(timestamps, values, names)?)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| AppError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| AppError::io(path, e))
}

/// `horizon_index, channel, mean, band_low, band_high`; horizon index from 1.
pub fn write_forecast(path: &Path, channels: &[String], mean: &Matrix, low: &Matrix, high: &Matrix) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["horizon_index", "channel", "mean", "band_low", "band_high"])?;
    for h in 0..mean.rows() {
        for (c, name) in channels.iter().enumerate() {
            w.write_record([
                (h + 1).to_string(),
                name.clone(),
                mean.get(h, c).to_string(),
                low.get(h, c).to_string(),
                high.get(h, c).to_string(),
            ])?;
        }
    }
    finish(w, path)
}

/// `step, horizon_index, channel, value`; step counts retained reverse
/// steps from 1.
pub fn write_trace(path: &Path, channels: &[String], trace: &DenoiseTrace) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "horizon_index", "channel", "value"])?;
    for (s, m) in trace.intermediates.iter().enumerate() {
        for h in 0..m.rows() {
            for (c, name) in channels.iter().enumerate() {
                w.write_record([(s + 1).to_string(), (h + 1).to_string(), name.clone(), m.get(h, c).to_string()])?;
            }
        }
    }
    finish(w, path)
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Pretrain => "pretrain",
        Phase::Joint => "joint",
    }
}

pub fn write_step_history(path: &Path, history: &History) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["phase", "epoch", "step", "l_llm", "l_diff", "total"])?;
    for s in &history.steps {
        w.write_record([
            phase_name(s.phase).to_string(),
            s.epoch.to_string(),
            s.step.to_string(),
            s.l_llm.to_string(),
            s.l_diff.map(|v| v.to_string()).unwrap_or_default(),
            s.total.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn write_epoch_history(path: &Path, history: &History) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["phase", "epoch", "train_llm", "train_diff", "train_total", "val_total"])?;
    for e in &history.epochs {
        w.write_record([
            phase_name(e.phase).to_string(),
            e.epoch.to_string(),
            e.train_llm.to_string(),
            e.train_diff.map(|v| v.to_string()).unwrap_or_default(),
            e.train_total.to_string(),
            e.val_total.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    finish(w, path)
}
