use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::EpochTrace;
use super::ExperimentConfig;
use crate::diagnostics::DiagnosticsBundle;
use crate::error::Result;
use crate::losses::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub held_out: usize,
    /// Rotation angle of the held-out domain.
    pub held_out_param: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub accuracy: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub source_test_accuracy: Option<f64>,
    pub traces: Vec<EpochTrace>,
    pub diagnostics: Option<DiagnosticsBundle>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Accuracy over seeds for one `(alpha, held-out)` cell. `sd` is the sample
/// standard deviation (zero for a single run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub alpha: f64,
    pub held_out: usize,
    pub held_out_param: f64,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: Option<f64>,
    pub sd_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub failed_runs: usize,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn assemble(config: ExperimentConfig, runs: Vec<RunRecord>, wall_clock_secs: f64) -> Self {
        let mut summary: Vec<SummaryRow> = Vec::new();
        for r in &runs {
            let pos = summary
                .iter()
                .position(|s| s.alpha.to_bits() == r.alpha.to_bits() && s.held_out == r.held_out);
            let row = match pos {
                Some(p) => &mut summary[p],
                None => {
                    summary.push(SummaryRow {
                        alpha: r.alpha,
                        held_out: r.held_out,
                        held_out_param: r.held_out_param,
                        runs: 0,
                        failed: 0,
                        mean_accuracy: None,
                        sd_accuracy: None,
                    });
                    summary.last_mut().expect("just pushed")
                }
            };
            row.runs += 1;
            if r.status == RunStatus::Failed {
                row.failed += 1;
            }
        }
        for row in &mut summary {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.alpha.to_bits() == row.alpha.to_bits() && r.held_out == row.held_out)
                .filter_map(|r| r.accuracy)
                .collect();
            if accs.is_empty() {
                continue;
            }
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let sd = if accs.len() > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            row.mean_accuracy = Some(mean);
            row.sd_accuracy = Some(sd);
        }
        let failed_runs = runs.iter().filter(|r| r.status == RunStatus::Failed).count();
        Self {
            config,
            runs,
            summary,
            failed_runs,
            wall_clock_secs,
        }
    }

    pub fn all_failed(&self) -> bool {
        !self.runs.is_empty() && self.failed_runs == self.runs.len()
    }

    /// Mean accuracy for `(alpha, held_out)` if any run of that cell succeeded.
    pub fn mean_accuracy(&self, alpha: f64, held_out: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.alpha.to_bits() == alpha.to_bits() && s.held_out == held_out)
            .and_then(|s| s.mean_accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Report JSON with every `wall_clock_secs` field removed, for comparing
/// repeated executions.
pub fn deterministic_json(report: &RunReport) -> Result<String> {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.remove("wall_clock_secs");
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(report)?;
    strip(&mut v);
    Ok(serde_json::to_string(&v)?)
}

/// `held_out,seed,loss_kind,alpha,accuracy`; accuracy is empty for failed runs.
pub fn write_results_csv<W: Write>(report: &RunReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["held_out", "seed", "loss_kind", "alpha", "accuracy"])?;
    for r in &report.runs {
        w.write_record([
            r.held_out.to_string(),
            r.seed.to_string(),
            r.loss_kind.to_string(),
            r.alpha.to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,domain,l_c,l_h`. Rows with domain `all` carry the batch-mean
/// objective terms; per-domain rows carry that domain's cross-entropy and
/// its mean pairwise posterior KL.
pub fn write_trace_csv<W: Write>(record: &RunRecord, writer: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "domain", "l_c", "l_h"])?;
    for t in &record.traces {
        w.write_record([t.epoch.to_string(), "all".into(), t.l_c.to_string(), t.l_h.to_string()])?;
        for d in &t.per_domain {
            w.write_record([t.epoch.to_string(), d.domain.to_string(), opt(d.l_c), opt(d.kl)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// File stem identifying one run inside an output directory.
pub fn run_stem(r: &RunRecord) -> String {
    format!("h{}_s{}_a{}", r.held_out, r.seed, r.alpha)
}

/// Writes `report.json`, `results.csv` and `traces/<run>.csv` under `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("traces"))?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    write_results_csv(report, std::fs::File::create(dir.join("results.csv"))?)?;
    for r in &report.runs {
        let f = std::fs::File::create(dir.join("traces").join(format!("{}.csv", run_stem(r))))?;
        write_trace_csv(r, f)?;
    }
    Ok(())
}
