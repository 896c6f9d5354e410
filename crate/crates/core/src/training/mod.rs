//! Optimisation, the hybrid-loss training step, checkpoints and frame
//! synthesis.

mod adam;
mod checkpoint;
mod config;
mod fit;
mod sweep;
mod synth;
mod trainer;

pub use adam::{Adam, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use fit::{batch_indices, fit, smooth, FitOutputs, LogRecord, LATEST_CHECKPOINT, LOG_HEADER};
pub use sweep::{
    run_sweep, write_sweep, SweepRow, DEFAULT_LAMBDA1_GRID, DEFAULT_LAMBDA2_GRID, SWEEP_HEADER,
};
pub use synth::{average_flow, synthesize_sequence, unified_flow};
pub use trainer::{LossBreakdown, Trainer, ROLE_DMM, ROLE_SUPERVISOR};

pub use crate::nn::kaiming_init;
