use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::trainer::{LossBreakdown, Trainer};
use crate::error::{invalid, io_error, DmmError, Result};
use crate::phantom::PairRecord;
use crate::rng;
use crate::supervision::SupervisorNet;

pub const LOG_HEADER: &str = "step,epoch,l_diff,l_mph,l_sup,l_hybrid";
pub const LATEST_CHECKPOINT: &str = "latest.dmmc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
}

impl LogRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, l.l_diff, l.l_mph, l.l_sup, l.l_hybrid
        )
    }
}

/// Where [`fit`] writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct FitOutputs {
    /// Loss CSV; on resume it is truncated to the rows of completed steps.
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many total steps even if the configured budget is
    /// larger, as if the run had been interrupted.
    pub stop_at: Option<u64>,
}

/// Pair indices of optimizer step `step` (0-based): each epoch visits a
/// fresh permutation drawn from the epoch's data sub-stream.
pub fn batch_indices(
    n_pairs: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> (usize, Vec<usize>) {
    let per_epoch = n_pairs.div_ceil(batch_size);
    let epoch = step as usize / per_epoch;
    let slot = step as usize % per_epoch;
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng::indexed_stream(seed, rng::DATA, epoch as u64));
    let end = ((slot + 1) * batch_size).min(n_pairs);
    (epoch, order[slot * batch_size..end].to_vec())
}

fn open_log(path: &Path, completed: u64) -> Result<File> {
    if completed == 0 {
        let mut f = File::create(path).map_err(|e| io_error(path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| io_error(path, e))?;
        return Ok(f);
    }
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let keep: Vec<String> = BufReader::new(file)
        .lines()
        .take(completed as usize + 1)
        .collect::<std::io::Result<_>>()
        .map_err(|e| io_error(path, e))?;
    if keep.len() != completed as usize + 1 || keep[0] != LOG_HEADER {
        return Err(DmmError::Format {
            what: "training log",
            reason: format!("{} holds fewer than {completed} step rows", path.display()),
        });
    }
    let mut f = File::create(path).map_err(|e| io_error(path, e))?;
    for line in keep {
        writeln!(f, "{line}").map_err(|e| io_error(path, e))?;
    }
    drop(f);
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))
}

/// Runs optimizer steps until the configured budget (or `outputs.stop_at`)
/// is reached, continuing from the trainer's current step.
pub fn fit(
    trainer: &mut Trainer,
    dataset: &[PairRecord],
    supervisor: &SupervisorNet,
    outputs: &FitOutputs,
) -> Result<Vec<LogRecord>> {
    if dataset.is_empty() {
        return Err(invalid("dataset", "no training pairs"));
    }
    let cfg = trainer.config().clone();
    let mut end = cfg.total_steps(dataset.len()) as u64;
    if let Some(stop) = outputs.stop_at {
        end = end.min(stop);
    }
    let mut log = match &outputs.log {
        Some(p) => Some((open_log(p, trainer.steps_done())?, p.clone())),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut records = Vec::new();
    while trainer.steps_done() < end {
        let (epoch, idx) = batch_indices(
            dataset.len(),
            cfg.batch_size,
            cfg.seed,
            trainer.steps_done(),
        );
        let batch: Vec<&PairRecord> = idx.iter().map(|&i| &dataset[i]).collect();
        let losses = trainer.train_step(&batch, supervisor, epoch)?;
        let record = LogRecord {
            step: trainer.steps_done(),
            epoch,
            losses,
        };
        if let Some((file, path)) = &mut log {
            writeln!(file, "{}", record.csv_row()).map_err(|e| io_error(path, e))?;
        }
        records.push(record);
        if let Some(dir) = &outputs.checkpoint_dir {
            let interval = cfg.checkpoint_interval as u64;
            if interval > 0 && trainer.steps_done() % interval == 0 {
                let ckpt = trainer.checkpoint();
                ckpt.save(&dir.join(format!("step-{:06}.dmmc", trainer.steps_done())))?;
                ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
            }
        }
    }
    if let Some((mut file, path)) = log {
        file.flush().map_err(|e| io_error(&path, e))?;
    }
    Ok(records)
}

/// Centered moving average with window `w`, truncated at the ends.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
