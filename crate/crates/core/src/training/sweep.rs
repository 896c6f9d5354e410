use std::io::Write;
use std::path::Path;

use super::config::TrainConfig;
use super::fit::{fit, FitOutputs};
use super::trainer::{LossBreakdown, Trainer};
use crate::error::{invalid, io_error, Result};
use crate::phantom::PairRecord;
use crate::supervision::SupervisorNet;

pub const DEFAULT_LAMBDA1_GRID: [f64; 2] = [0.0, 0.1];
pub const DEFAULT_LAMBDA2_GRID: [f64; 2] = [0.0, 0.01];
pub const SWEEP_HEADER: &str = "lambda1,lambda2,final_l_sup,neg_log_l_sup,final_l_hybrid";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Mean supervision loss over the last `tail` steps of the cell.
    pub final_l_sup: f64,
    pub neg_log_l_sup: f64,
    pub final_l_hybrid: f64,
}

/// Trains one fresh model per (λ1, λ2) cell from `base`, which fixes the
/// seed, so cells do not depend on each other or on their order. The final
/// losses are averaged over the last `tail` steps to damp batch noise.
pub fn run_sweep(
    base: &TrainConfig,
    lambda1: &[f64],
    lambda2: &[f64],
    tail: usize,
    dataset: &[PairRecord],
    supervisor: &SupervisorNet,
) -> Result<Vec<SweepRow>> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(invalid("sweep", "both λ grids need at least one value"));
    }
    if tail == 0 {
        return Err(invalid("sweep_tail", "must be at least 1"));
    }
    let mut rows = Vec::new();
    for &l1 in lambda1 {
        for &l2 in lambda2 {
            let cfg = TrainConfig {
                lambda1: l1,
                lambda2: l2,
                ..base.clone()
            };
            let mut trainer = Trainer::new(cfg)?;
            let log = fit(&mut trainer, dataset, supervisor, &FitOutputs::default())?;
            let last = &log[log.len().saturating_sub(tail)..];
            let mean = |f: fn(&LossBreakdown) -> f64| {
                last.iter().map(|r| f(&r.losses)).sum::<f64>() / last.len() as f64
            };
            let l_sup = mean(|l| l.l_sup);
            rows.push(SweepRow {
                lambda1: l1,
                lambda2: l2,
                final_l_sup: l_sup,
                neg_log_l_sup: -l_sup.ln(),
                final_l_hybrid: mean(|l| l.l_hybrid),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lambda1, r.lambda2, r.final_l_sup, r.neg_log_l_sup, r.final_l_hybrid
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| io_error(path, e))
}
