//! Variant ablation and smoothing-factor sweep drivers.

use std::path::Path;

use log::{error, info};

use crate::config::TrainConfig;
use crate::data::DataSplits;
use crate::decomp::check_alpha;
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::report::{self, RunReport};
use crate::scalar::Scalar;
use crate::train::{train, TrainOptions};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

fn run_one<S: Scalar>(config: TrainConfig, splits: &DataSplits, dataset: &str, dir: Option<&Path>) -> Result<RunReport> {
    let opts = TrainOptions {
        out_dir: dir.map(Path::to_path_buf),
        ..Default::default()
    };
    let (rep, _) = train::<S>(config, splits, dataset, &opts)?;
    rep.ok_or_else(|| Error::InvalidArgument("run stopped before finishing".into()))
}

/// Train every variant with the same seed and budget. A failing variant is
/// logged and returned as an error without stopping the others. With `out`,
/// each run gets its own subdirectory and the completed rows plus the
/// comparison table are written at the top level.
pub fn run_ablation<S: Scalar>(
    base: &TrainConfig,
    splits: &DataSplits,
    dataset: &str,
    out: Option<&Path>,
) -> Result<Vec<(Variant, Result<RunReport>)>> {
    let mut results = Vec::new();
    for v in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        let dir = out.map(|o| o.join(v.name()));
        info!("ablation: {v}");
        let r = run_one::<S>(cfg, splits, dataset, dir.as_deref());
        if let Err(e) = &r {
            error!("variant {v} failed: {e}");
        }
        results.push((v, r));
    }
    if let Some(out) = out {
        let done: Vec<RunReport> = results.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
        report::write_reports(out, &done)?;
        std::fs::write(out.join("ablation.csv"), report::ablation_table(&done))?;
    }
    Ok(results)
}

/// One run per smoothing factor; the first failure aborts the sweep.
pub fn run_alpha_sweep<S: Scalar>(
    base: &TrainConfig,
    splits: &DataSplits,
    dataset: &str,
    alphas: &[f64],
    out: Option<&Path>,
) -> Result<Vec<RunReport>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one value".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let mut reports = Vec::new();
    for &a in alphas {
        let mut cfg = base.clone();
        cfg.model.alpha = a;
        let dir = out.map(|o| o.join(format!("alpha_{a}")));
        info!("alpha sweep: {a}");
        reports.push(run_one::<S>(cfg, splits, dataset, dir.as_deref())?);
    }
    if let Some(out) = out {
        report::write_reports(out, &reports)?;
        std::fs::write(out.join("alpha_sweep.csv"), report::alpha_table(&reports))?;
    }
    Ok(reports)
}
