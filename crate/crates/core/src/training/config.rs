use crate::diffusion::{DenoiserConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_MAX};
use crate::error::{invalid, Result};
use crate::morphing::RegNetConfig;

/// Hyper-parameters of a morphing-model training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the morphing loss in the hybrid objective.
    pub lambda1: f64,
    /// Weight of the supervision loss in the hybrid objective.
    pub lambda2: f64,
    pub lr_denoiser: f64,
    pub lr_regnet: f64,
    /// Upper bound on passes over the dataset.
    pub epochs: usize,
    /// Upper bound on optimizer steps; the run ends at whichever bound is
    /// reached first.
    pub steps: usize,
    pub batch_size: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    /// Number of recent flow fields kept per pair and averaged.
    pub flow_window: usize,
    /// Feed a detached copy of the predicted noise to the registration pass
    /// that produces the supervised frames.
    pub stop_supervision_grad: bool,
    /// Draw a fresh step ceiling uniformly from `1..=t_max` at every epoch
    /// and sample steps below it, instead of sampling from the full range.
    pub resample_t_per_epoch: bool,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_interval: usize,
    pub denoiser: DenoiserConfig,
    pub regnet: RegNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.01,
            lr_denoiser: 2e-4,
            lr_regnet: 2e-3,
            epochs: 500,
            steps: 300,
            batch_size: 8,
            t_max: DEFAULT_T_MAX,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            seed: 7,
            flow_window: 5,
            stop_supervision_grad: false,
            resample_t_per_epoch: false,
            checkpoint_interval: 0,
            denoiser: DenoiserConfig::default(),
            regnet: RegNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(
                    key,
                    format!("{v} must be a finite non-negative number"),
                ));
            }
        }
        for (key, v) in [
            ("lr_denoiser", self.lr_denoiser),
            ("lr_regnet", self.lr_regnet),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("{v} must be positive")));
            }
        }
        if self.flow_window == 0 {
            return Err(invalid("flow_window", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.t_max == 0 {
            return Err(invalid("t_max", "must be at least 1"));
        }
        if self.epochs == 0 && self.steps == 0 {
            return Err(invalid("steps", "either steps or epochs must be positive"));
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `n_pairs`.
    pub fn total_steps(&self, n_pairs: usize) -> usize {
        let per_epoch = n_pairs.div_ceil(self.batch_size);
        let by_epochs = self.epochs.saturating_mul(per_epoch);
        match (self.steps, self.epochs) {
            (0, _) => by_epochs,
            (s, 0) => s,
            (s, _) => s.min(by_epochs),
        }
    }
}
