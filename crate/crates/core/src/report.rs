//! Run reports and the comparison tables built from them.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completed training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub variant: String,
    pub seq_len: usize,
    pub pred_len: usize,
    pub alpha: f64,
    pub loss: String,
    pub seed: u64,
    pub epochs: usize,
    /// 1-based epoch whose weights were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub test_mse: f64,
    pub test_mae: f64,
    pub wall_seconds: f64,
    pub epoch_seconds: Vec<f64>,
    /// Mean wall-clock time of one test batch forward pass.
    pub infer_batch_seconds: f64,
    pub param_count: usize,
    pub config_hash: String,
    /// Effective configuration as `key=value` pairs joined by `;`.
    pub config: String,
}

pub const CSV_COLUMNS: [&str; 19] = [
    "dataset",
    "variant",
    "seq_len",
    "pred_len",
    "alpha",
    "loss",
    "seed",
    "epochs",
    "best_epoch",
    "train_loss",
    "val_loss",
    "test_mse",
    "test_mae",
    "wall_seconds",
    "epoch_seconds",
    "infer_batch_seconds",
    "param_count",
    "config_hash",
    "config",
];

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

impl RunReport {
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.variant.clone(),
            self.seq_len.to_string(),
            self.pred_len.to_string(),
            self.alpha.to_string(),
            self.loss.clone(),
            self.seed.to_string(),
            self.epochs.to_string(),
            self.best_epoch.to_string(),
            join(&self.train_loss),
            join(&self.val_loss),
            self.test_mse.to_string(),
            self.test_mae.to_string(),
            self.wall_seconds.to_string(),
            join(&self.epoch_seconds),
            self.infer_batch_seconds.to_string(),
            self.param_count.to_string(),
            self.config_hash.clone(),
            self.config.clone(),
        ]
    }

    /// The fields that must repeat exactly for a fixed seed, config and data
    /// file. Timing is excluded.
    pub fn metrics_fingerprint(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.train_loss.iter().chain(&self.val_loss).map(|x| x.to_bits()).collect();
        v.extend([self.test_mse.to_bits(), self.test_mae.to_bits(), self.best_epoch as u64]);
        v
    }
}

pub fn write_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Append one row to a JSON-lines file, creating it if needed.
pub fn append_jsonl(path: &Path, report: &RunReport) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunReport>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Write `report.csv` and `report.jsonl` into `dir`.
pub fn write_reports(dir: &Path, reports: &[RunReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("report.csv"), reports)?;
    write_jsonl(&dir.join("report.jsonl"), reports)
}

/// Variant comparison, one row per variant with test MSE/MAE.
pub fn ablation_table(reports: &[RunReport]) -> String {
    let mut s = String::from("dataset,pred_len,variant,mse,mae,param_count\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.dataset, r.pred_len, r.variant, r.test_mse, r.test_mae, r.param_count
        ));
    }
    s
}

/// Smoothing-factor sweep, one row per alpha. `best` marks the lowest test
/// MSE within each dataset and horizon; `best_alpha` repeats its alpha.
pub fn alpha_table(reports: &[RunReport]) -> String {
    let mut s = String::from("dataset,pred_len,alpha,mse,mae,best,best_alpha\n");
    for r in reports {
        let group = reports
            .iter()
            .filter(|o| o.dataset == r.dataset && o.pred_len == r.pred_len);
        let best = group
            .min_by(|a, b| a.test_mse.total_cmp(&b.test_mse))
            .expect("group contains r");
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{}\n",
            r.dataset,
            r.pred_len,
            r.alpha,
            r.test_mse,
            r.test_mae,
            if std::ptr::eq(best, r) { "*" } else { "" },
            best.alpha
        ));
    }
    s
}
