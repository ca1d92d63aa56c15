//! Run reports: per-step records plus a summary, as JSON or CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub recon: f64,
    /// Quantizer loss term of the step (pool average for adaptive runs).
    pub vq: f64,
    /// Gradient gap, on steps where it was measured.
    pub gap: Option<f64>,
    pub temperature: f64,
    /// Selections per codebook in this step's batch.
    pub usage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Sum over validation batches of the batch-mean reconstruction loss
    /// (one complete pass; depends on the evaluation batch size).
    pub final_val_recon_sum: f64,
    /// Per-sample mean reconstruction loss over the validation split.
    pub final_val_recon_mean: f64,
    pub final_val_quant_mean: f64,
    pub val_batches: usize,
    pub val_samples: usize,
    /// Validation selections per codebook (adaptive runs).
    pub val_usage: Vec<u64>,
    pub steps: u64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub num_codebooks: usize,
    pub records: Vec<StepRecord>,
    pub summary: Summary,
}

/// Shortest round-trip text of a float, shared by both output formats.
fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("float serializes")
}

impl RunReport {
    pub fn check(&self) -> AppResult<()> {
        for w in self.records.windows(2) {
            if w[1].step <= w[0].step {
                return Err(AppError::format(
                    "run report",
                    format!("steps not increasing: {} then {}", w[0].step, w[1].step),
                ));
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.usage.len() != self.num_codebooks) {
            return Err(AppError::format("run report", format!("step {} has {} usage counts", r.step, r.usage.len())));
        }
        Ok(())
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "recon", "vq", "gap", "temperature"].iter().map(|s| s.to_string()).collect();
        h.extend((0..self.num_codebooks).map(|i| format!("usage_{i}")));
        h
    }

    pub fn to_csv(&self) -> AppResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| AppError::format("csv report", e.to_string());
        w.write_record(self.csv_header()).map_err(err)?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                num(r.recon),
                num(r.vq),
                r.gap.map(num).unwrap_or_default(),
                num(r.temperature),
            ];
            row.extend(r.usage.iter().map(u64::to_string));
            w.write_record(&row).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| AppError::format("csv report", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn read(path: &Path) -> AppResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| AppError::MissingInput { path: path.into(), source })?;
        let r: RunReport = serde_json::from_str(&text).map_err(|e| AppError::parse(path.display().to_string(), &e))?;
        r.check()?;
        Ok(r)
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> AppResult<()> {
        write_file(&dir.join("report.json"), &(self.to_json() + "\n"))?;
        write_file(&dir.join("report.csv"), &self.to_csv()?)
    }
}

pub fn write_file(path: &Path, contents: &str) -> AppResult<()> {
    std::fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        RunReport {
            num_codebooks: 2,
            records: vec![
                StepRecord { step: 0, recon: 0.5, vq: 0.1, gap: Some(1e-7), temperature: 3.0, usage: vec![4, 0] },
                StepRecord { step: 1, recon: 0.25, vq: 0.05, gap: None, temperature: 2.0, usage: vec![1, 3] },
            ],
            summary: Summary {
                final_val_recon_sum: 1.0,
                final_val_recon_mean: 0.5,
                final_val_quant_mean: 0.0,
                val_batches: 2,
                val_samples: 8,
                val_usage: vec![5, 3],
                steps: 2,
                wall_time_s: 0.0,
                config_hash: "ab".into(),
            },
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,recon,vq,gap,temperature,usage_0,usage_1"));
        assert_eq!(lines.next(), Some("0,0.5,0.1,1e-7,3.0,4,0"));
        assert_eq!(lines.next(), Some("1,0.25,0.05,,2.0,1,3"));
    }

    #[test]
    fn steps_must_increase() {
        let mut r = report();
        r.records[1].step = 0;
        assert!(r.check().is_err());
    }
}
