//! Aggregation of run records into boxplot-ready summary statistics.

use serde::{Deserialize, Serialize};

use hetgp::error::{Error, Result};

use crate::records::RunRecord;

/// Aggregate of one `(case, model, task, metric)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub case: String,
    pub model: String,
    pub task: usize,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile on a sorted slice (the common "type 7"
/// definition; for `[1,2,3,4,5]` the quartiles are 2 and 4).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn aggregate(values: &mut [f64]) -> (f64, f64, f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    (
        mean,
        sd,
        quantile(values, 0.5),
        quantile(values, 0.25),
        quantile(values, 0.75),
    )
}

/// Collapses records into per-`(case, model, task, metric)` statistics.
/// Error records are skipped.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::contract("no records to summarize"));
    }
    let mut groups: Vec<((String, String, usize), Vec<f64>, Vec<f64>)> = Vec::new();
    for r in records {
        if r.is_error() {
            continue;
        }
        let key = (r.case.clone(), r.model.clone(), r.task);
        let slot = match groups.iter_mut().find(|(k, _, _)| *k == key) {
            Some(s) => s,
            None => {
                groups.push((key, Vec::new(), Vec::new()));
                groups.last_mut().unwrap()
            }
        };
        if let Some(v) = r.smse {
            slot.1.push(v);
        }
        if let Some(v) = r.smll {
            slot.2.push(v);
        }
    }
    if groups.iter().all(|(_, s, l)| s.is_empty() && l.is_empty()) {
        return Err(Error::contract("no successful records to summarize"));
    }

    let mut out = Vec::new();
    for ((case, model, task), mut smse_vals, mut smll_vals) in groups {
        for (metric, values) in [("smse", &mut smse_vals), ("smll", &mut smll_vals)] {
            if values.is_empty() {
                continue;
            }
            let (mean, sd, median, q1, q3) = aggregate(values);
            out.push(SummaryRow {
                case: case.clone(),
                model: model.clone(),
                task,
                metric: metric.to_string(),
                count: values.len(),
                mean,
                sd,
                median,
                q1,
                q3,
            });
        }
    }
    Ok(out)
}

/// Writes summary rows as CSV.
pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in rows {
        writer
            .serialize(r)
            .map_err(|e| Error::contract(format!("csv write failure: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::contract(format!("csv flush failure: {e}")))?;
    Ok(())
}
