//! Forward noising process, time embedding and the conditional noise
//! predictor.

mod denoiser;
mod schedule;

pub use denoiser::{DenoiserConfig, DenoiserNet};
pub use schedule::{
    forward_perturb, iterated_forward, make_schedule, perturb_batch, time_embed, NoiseSchedule,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_MAX,
};

use dmm_tensor::{Tape, Var};

use crate::error::Result;

/// Mean over every element of `(n - n_hat)^2`.
pub fn diffusion_loss(tape: &mut Tape, noise: Var, predicted: Var) -> Result<Var> {
    let diff = tape.sub(noise, predicted)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}
