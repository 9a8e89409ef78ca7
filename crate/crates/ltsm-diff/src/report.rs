//! Plain-text renderings of metric reports and result grids.

use ltsm_diff_core::evaluation::{AblationRow, AblationTable, CellStatus, MetricReport, TransferTable};

/// Left-aligned first column, right-aligned others, two-space gutters.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        let parts: Vec<String> = cells
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&mut header.iter().copied());
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(&mut r.iter().map(String::as_str)));
        out.push('\n');
    }
    out
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn meta_line(r: &MetricReport) -> String {
    format!("dataset: {}  config: {}  seed: {}\n", r.dataset, r.config_hash, r.seed)
}

pub fn metric_report(r: &MetricReport) -> String {
    let mut rows: Vec<Vec<String>> =
        r.per_horizon.iter().map(|h| vec![h.horizon.to_string(), num(h.mse), num(h.mae)]).collect();
    rows.push(vec!["avg".into(), num(r.avg_mse), num(r.avg_mae)]);
    format!("{}{}", meta_line(r), table(&["horizon", "MSE", "MAE"], &rows))
}

pub fn transfer_table(t: &TransferTable, meta: &MetricReport) -> String {
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            vec![
                format!("{}%", r.ratio * 100.0),
                r.train_windows.to_string(),
                r.epochs_run.to_string(),
                num(r.report.avg_mse),
                num(r.report.avg_mae),
            ]
        })
        .collect();
    let mut out = meta_line(meta);
    out.push_str(&table(&["ratio", "windows", "epochs", "MSE", "MAE"], &rows));
    if !t.reinitialized.is_empty() {
        out.push_str(&format!("re-initialized: {}\n", t.reinitialized.join(", ")));
    }
    out
}

fn ablation_rows(rows: &[AblationRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let (mse, mae) = match (&r.status, &r.report) {
                (CellStatus::Completed, Some(rep)) => (num(rep.avg_mse), num(rep.avg_mae)),
                _ => ("unimplemented".into(), "-".into()),
            };
            vec![r.label.clone(), r.trainable_params.to_string(), r.denoiser_constructed.to_string(), mse, mae]
        })
        .collect()
}

pub fn ablation_table(t: &AblationTable, meta: &MetricReport) -> String {
    let header = ["cell", "trainable", "denoiser", "MSE", "MAE"];
    let mut out = meta_line(meta);
    for (title, rows) in [("variants", &t.variant_rows), ("layers", &t.layer_rows), ("lambda", &t.lambda_rows)] {
        if rows.is_empty() {
            continue;
        }
        out.push_str(&format!("\n{title}\n"));
        out.push_str(&table(&header, &ablation_rows(rows)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let t = table(&["a", "bb"], &[vec!["long".into(), "1".into()], vec!["x".into(), "100".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a      bb");
        assert_eq!(lines[1], "---------");
        assert_eq!(lines[2], "long    1");
        assert_eq!(lines[3], "x     100");
    }
}
