use dmm_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::image::Image;

pub const DEFAULT_T_MAX: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Per-step variances and their cumulative signal retention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β ramp from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(invalid("t_max", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(
            "beta_start",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    /// Schedule with explicit per-step variances, each in (0, 1).
    pub fn from_beta(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("beta", "empty schedule"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid("beta", format!("{b} outside (0, 1)")));
        }
        Ok(Self::from_betas(beta))
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_max() {
            return Err(invalid("t", format!("{t} outside [0, {})", self.t_max())));
        }
        Ok(())
    }
}

/// `sqrt(ᾱ_t)·x + sqrt(1 − ᾱ_t)·n`.
pub fn forward_perturb(
    x: &Image,
    t: usize,
    noise: &Image,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    x.same_dims(noise)?;
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar[t];
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x
        .data()
        .iter()
        .zip(noise.data())
        .map(|(v, n)| s * v + r * n)
        .collect();
    Image::new(x.height(), x.width(), data)
}

/// Batched [`forward_perturb`] over `(n, c, h, w)` with one step per sample.
pub fn perturb_batch(
    x: &Tensor,
    ts: &[usize],
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (n, ..) = x.dims4("perturb_batch")?;
    if noise.shape() != x.shape() || ts.len() != n {
        return Err(crate::error::DmmError::Shape(format!(
            "perturb_batch: x {:?}, noise {:?}, {} steps",
            x.shape(),
            noise.shape(),
            ts.len()
        )));
    }
    let per = x.len() / n;
    let mut out = Vec::with_capacity(x.len());
    for (s, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = s * per..(s + 1) * per;
        out.extend(
            x.data()[range.clone()]
                .iter()
                .zip(&noise.data()[range])
                .map(|(v, e)| a * v + b * e),
        );
    }
    Ok(Tensor::new(x.shape(), out)?)
}

/// Applies the single-step kernel `x ← sqrt(1 − β_i)·x + sqrt(β_i)·n_i` for
/// the first `steps` entries of the schedule. The result has the law of
/// [`forward_perturb`] at index `steps − 1`; `steps = 0` returns `x`.
pub fn iterated_forward<R: Rng + ?Sized>(
    x: &Image,
    steps: usize,
    rng: &mut R,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    if steps > schedule.t_max() {
        return Err(invalid(
            "t",
            format!("{steps} steps exceed T_max {}", schedule.t_max()),
        ));
    }
    let mut out = x.clone();
    for &b in &schedule.beta[..steps] {
        let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
        for v in out.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = keep * *v + add * n;
        }
    }
    Ok(out)
}

/// Sinusoidal embedding: entry `2k` is `sin(t / 10000^(2k/dim))`, entry
/// `2k+1` the matching cosine.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(
            "time_dim",
            format!("{dim} is not a positive even number"),
        ));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * k as f64 / dim as f64);
        let arg = t / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}
