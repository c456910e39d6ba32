use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunResult;
use crate::error::{Error, Result};

/// `(baseline - metric) / baseline * 100`, rounded to two decimals.
pub fn compute_dr(baseline: f64, metric: f64) -> Result<f64> {
    if baseline <= 0.0 || !baseline.is_finite() || !metric.is_finite() {
        return Err(Error::Domain(format!(
            "decrease rate needs a positive baseline and finite metric, got {baseline} and {metric}"
        )));
    }
    let dr = ((baseline - metric) / baseline * 100.0 * 100.0).round() / 100.0;
    // Avoid printing "-0.00".
    Ok(if dr == 0.0 { 0.0 } else { dr })
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub z: usize,
    #[serde(rename = "T")]
    pub trials: usize,
    pub metric: String,
    pub best_value: f64,
    pub dr_percent: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Decrease rates against the `T = 1` run sharing dataset, z, metric,
/// epochs and seed. Rows keep the input order.
pub fn build_report(results: &[RunResult]) -> Result<Vec<ReportRow>> {
    let key = |r: &RunResult| (r.dataset.clone(), r.z, r.metric.clone(), r.epochs, r.seed);
    results
        .iter()
        .map(|r| {
            let baselines: Vec<&RunResult> = results
                .iter()
                .filter(|b| b.trials == 1 && key(b) == key(r))
                .collect();
            let base = match baselines.as_slice() {
                [b] => b,
                [] => {
                    return Err(Error::Config(format!(
                        "no T=1 baseline for dataset {} z={} metric {} seed {}",
                        r.dataset, r.z, r.metric, r.seed
                    )))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "several T=1 baselines for dataset {} z={} seed {}",
                        r.dataset, r.z, r.seed
                    )))
                }
            };
            Ok(ReportRow {
                dataset: r.dataset.clone(),
                z: r.z,
                trials: r.trials,
                metric: r.metric.clone(),
                best_value: r.best_value,
                dr_percent: compute_dr(base.best_value, r.best_value)?,
                epochs: r.epochs,
                seed: r.seed,
            })
        })
        .collect()
}

/// CSV text with header `dataset,z,T,metric,best_value,dr_percent,epochs,seed`.
/// Metric values use the shortest exact decimal form; DR has two decimals.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "z",
        "T",
        "metric",
        "best_value",
        "dr_percent",
        "epochs",
        "seed",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.z.to_string(),
            r.trials.to_string(),
            r.metric.clone(),
            format!("{}", r.best_value),
            format!("{:.2}", r.dr_percent),
            r.epochs.to_string(),
            r.seed.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(report_csv(rows).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Parse a report back, for consistency checks.
pub fn read_report(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| Error::Format {
            what: "report".into(),
            offset: e.position().map_or(0, |p| p.byte()),
            reason: e.to_string(),
        })
}
