use std::collections::VecDeque;

use dmm_tensor::{Tape, Tensor, TensorError};
use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::synth::unified_flow;
use crate::diffusion::{diffusion_loss, make_schedule, perturb_batch, DenoiserNet, NoiseSchedule};
use crate::error::{DmmError, Result};
use crate::image::Image;
use crate::morphing::{morph_loss, warp_batch, FlowField, RegNet};
use crate::nn::{Mode, ParamSet};
use crate::phantom::PairRecord;
use crate::rng::{self, DmmRng, RngState};
use crate::supervision::{supervision_loss, SupervisorNet};

pub const ROLE_DMM: &str = "dmm";
pub const ROLE_SUPERVISOR: &str = "supervisor";

const DENOISER_PREFIX: &str = "denoiser.";
const REGNET_PREFIX: &str = "regnet.";
const EVAL_NOISE: &str = "eval-noise";

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_mph: f64,
    pub l_sup: f64,
    pub l_hybrid: f64,
}

/// Both networks, their optimizers, the training RNG streams and the flow
/// fields of the most recent steps.
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    denoiser: DenoiserNet,
    regnet: RegNet,
    opt_denoiser: Adam,
    opt_regnet: Adam,
    step: u64,
    t_rng: DmmRng,
    dropout_rng: DmmRng,
    recent: VecDeque<Vec<(u32, FlowField)>>,
}

fn grads_of(grads: &mut dmm_tensor::Gradients, vars: &[dmm_tensor::Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| grads.take(v).expect("every bound parameter is a leaf"))
        .collect()
}

fn non_finite(step: u64, err: DmmError) -> DmmError {
    match err {
        DmmError::Tensor(TensorError::NonFinite { op }) => DmmError::NonFiniteLoss {
            step,
            diagnostics: format!("`{op}` produced a non-finite value"),
        },
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = make_schedule(config.t_max, config.beta_start, config.beta_end)?;
        let mut init = rng::stream(config.seed, rng::INIT);
        let denoiser = DenoiserNet::new(config.denoiser.clone(), &mut init)?;
        let regnet = RegNet::new(config.regnet.clone(), &mut init)?;
        let opt_denoiser = Adam::new(denoiser.params(), config.lr_denoiser)?;
        let opt_regnet = Adam::new(regnet.params(), config.lr_regnet)?;
        Ok(Self {
            t_rng: rng::stream(config.seed, rng::DIFFUSION_T),
            dropout_rng: rng::stream(config.seed, rng::DROPOUT),
            config,
            schedule,
            denoiser,
            regnet,
            opt_denoiser,
            opt_regnet,
            step: 0,
            recent: VecDeque::new(),
        })
    }

    /// Restores a trainer saved with [`Trainer::checkpoint`]. The
    /// architecture comes from `config`; every stored tensor must match it.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_role(ROLE_DMM)?;
        let mut t = Self::new(config)?;
        let lookup =
            |prefix: &'static str| move |name: &str| ckpt.param(&format!("{prefix}{name}"));
        t.denoiser.params_mut().load(lookup(DENOISER_PREFIX))?;
        t.regnet.params_mut().load(lookup(REGNET_PREFIX))?;
        t.opt_denoiser = checked_optimizer(ckpt.optimizer("denoiser")?, t.denoiser.params())?;
        t.opt_regnet = checked_optimizer(ckpt.optimizer("regnet")?, t.regnet.params())?;
        t.t_rng = ckpt.rng(rng::DIFFUSION_T)?.restore();
        t.dropout_rng = ckpt.rng(rng::DROPOUT)?.restore();
        t.step = ckpt.scalar("step")? as u64;
        t.recent = ckpt.flow_history.iter().cloned().collect();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = Vec::new();
        for (prefix, set) in [
            (DENOISER_PREFIX, self.denoiser.params()),
            (REGNET_PREFIX, self.regnet.params()),
        ] {
            params.extend(set.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        }
        Checkpoint {
            role: ROLE_DMM.into(),
            params,
            optimizers: vec![
                ("denoiser".into(), self.opt_denoiser.clone()),
                ("regnet".into(), self.opt_regnet.clone()),
            ],
            rngs: vec![
                (rng::DIFFUSION_T.into(), RngState::capture(&self.t_rng)),
                (rng::DROPOUT.into(), RngState::capture(&self.dropout_rng)),
            ],
            flow_history: self.recent.iter().cloned().collect(),
            scalars: vec![("step".into(), self.step as f64)],
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &DenoiserNet {
        &self.denoiser
    }

    pub fn regnet(&self) -> &RegNet {
        &self.regnet
    }

    /// Optimizer steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn recent_flows(&self) -> impl Iterator<Item = &Vec<(u32, FlowField)>> {
        self.recent.iter()
    }

    /// Averaged field over the retained recent steps; see [`unified_flow`].
    pub fn unified_flow(&self) -> Result<FlowField> {
        if self.recent.len() < self.config.flow_window {
            return Err(DmmError::InsufficientHistory {
                have: self.recent.len(),
                need: self.config.flow_window,
            });
        }
        let recent: Vec<_> = self.recent.iter().cloned().collect();
        unified_flow(&recent)
    }

    fn step_ceiling(&self, epoch: usize) -> usize {
        if self.config.resample_t_per_epoch {
            rng::indexed_stream(self.config.seed, rng::DIFFUSION_T, epoch as u64)
                .random_range(1..=self.config.t_max)
        } else {
            self.config.t_max
        }
    }

    /// One step of the hybrid objective on `batch`: noise the targets,
    /// predict the noise, predict the flow, score the fully warped source
    /// against the target and the η = 0.5 / 0.75 frames with the frozen
    /// classifier, then update both networks with their own Adam state.
    pub fn train_step(
        &mut self,
        batch: &[&PairRecord],
        supervisor: &SupervisorNet,
        epoch: usize,
    ) -> Result<LossBreakdown> {
        let step = self.step + 1;
        self.try_step(batch, supervisor, epoch)
            .map_err(|e| non_finite(step, e))
    }

    fn try_step(
        &mut self,
        batch: &[&PairRecord],
        supervisor: &SupervisorNet,
        epoch: usize,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(DmmError::Shape("empty batch".into()));
        }
        let sources: Vec<&Image> = batch.iter().map(|r| &r.source).collect();
        let targets: Vec<&Image> = batch.iter().map(|r| &r.target).collect();
        let x_s = Image::stack(&sources)?;
        let x_target = Image::stack(&targets)?;
        let ceiling = self.step_ceiling(epoch);
        let steps: Vec<usize> = (0..batch.len())
            .map(|_| self.t_rng.random_range(0..ceiling))
            .collect();
        let noise = Tensor::from_fn(x_s.shape(), |_| self.t_rng.sample(StandardNormal));
        let x_t = perturb_batch(&x_target, &steps, &noise, &self.schedule)?;

        let cfg = &self.config;
        let mut tape = Tape::new();
        let bd = self.denoiser.params().bind(&mut tape, true);
        let br = self.regnet.params().bind(&mut tape, true);
        let bs = supervisor.params().bind(&mut tape, false);
        let xs = tape.constant(x_s);
        let xtg = tape.constant(x_target);
        let xt = tape.constant(x_t);
        let n = tape.constant(noise);

        let mut mode = if cfg.denoiser.dropout > 0.0 {
            Mode::Train(&mut self.dropout_rng)
        } else {
            Mode::Eval
        };
        let n_hat = self
            .denoiser
            .predict_noise(&mut tape, &bd, xs, xtg, xt, &steps, &mut mode)?;
        let l_diff = diffusion_loss(&mut tape, n, n_hat)?;

        let phi = self.regnet.forward(&mut tape, &br, xs, n_hat)?;
        let warped = warp_batch(&mut tape, xs, phi)?;
        let l_mph = morph_loss(&mut tape, warped, xtg)?;

        let phi_sup = if cfg.stop_supervision_grad {
            let detached = tape.detach(n_hat)?;
            self.regnet.forward(&mut tape, &br, xs, detached)?
        } else {
            phi
        };
        let half = tape.scale(phi_sup, 0.5)?;
        let late = tape.scale(phi_sup, 0.75)?;
        let frame_half = warp_batch(&mut tape, xs, half)?;
        let frame_late = warp_batch(&mut tape, xs, late)?;
        let l_sup = supervision_loss(&mut tape, supervisor, &bs, frame_half, frame_late)?;

        let weighted_mph = tape.scale(l_mph, cfg.lambda1)?;
        let weighted_sup = tape.scale(l_sup, cfg.lambda2)?;
        let partial = tape.add(l_diff, weighted_mph)?;
        let l_hybrid = tape.add(partial, weighted_sup)?;

        let losses = LossBreakdown {
            l_diff: tape.value(l_diff).item()?,
            l_mph: tape.value(l_mph).item()?,
            l_sup: tape.value(l_sup).item()?,
            l_hybrid: tape.value(l_hybrid).item()?,
        };
        let flows = tape.value(phi).clone();

        let mut grads = tape.backward(l_hybrid)?;
        let gd = grads_of(&mut grads, bd.vars());
        let gr = grads_of(&mut grads, br.vars());
        for (name, g) in [("denoiser", &gd), ("regnet", &gr)] {
            if !g.iter().all(Tensor::all_finite) {
                return Err(DmmError::NonFiniteLoss {
                    step: self.step + 1,
                    diagnostics: format!("non-finite {name} gradient"),
                });
            }
        }
        self.opt_denoiser.update(self.denoiser.params_mut(), &gd)?;
        self.opt_regnet.update(self.regnet.params_mut(), &gr)?;

        let tagged = batch
            .iter()
            .enumerate()
            .map(|(i, r)| Ok((r.id as u32, FlowField::from_tensor(&flows, i)?)))
            .collect::<Result<Vec<_>>>()?;
        self.recent.push_back(tagged);
        while self.recent.len() > self.config.flow_window {
            self.recent.pop_front();
        }
        self.step += 1;
        Ok(losses)
    }

    /// Deterministic flow for one pair at inference time: the target is
    /// noised at the middle step with noise drawn from a stream keyed by
    /// `pair_id`, and both networks run in eval mode.
    pub fn pair_flow(&self, source: &Image, target: &Image, pair_id: u64) -> Result<FlowField> {
        source.same_dims(target)?;
        let t = self.config.t_max / 2;
        let mut r = rng::indexed_stream(self.config.seed, EVAL_NOISE, pair_id);
        let noise = Tensor::from_fn(&[1, 1, source.height(), source.width()], |_| {
            r.sample(StandardNormal)
        });
        let x_t = perturb_batch(&target.to_tensor(), &[t], &noise, &self.schedule)?;
        let mut tape = Tape::new();
        let bd = self.denoiser.params().bind(&mut tape, false);
        let br = self.regnet.params().bind(&mut tape, false);
        let xs = tape.constant(source.to_tensor());
        let xtg = tape.constant(target.to_tensor());
        let xt = tape.constant(x_t);
        let n_hat =
            self.denoiser
                .predict_noise(&mut tape, &bd, xs, xtg, xt, &[t], &mut Mode::Eval)?;
        let phi = self.regnet.forward(&mut tape, &br, xs, n_hat)?;
        FlowField::from_tensor(tape.value(phi), 0)
    }
}

fn checked_optimizer(opt: &Adam, params: &ParamSet) -> Result<Adam> {
    let shapes_match = opt.m.len() == params.len()
        && opt.v.len() == params.len()
        && opt
            .m
            .iter()
            .zip(&opt.v)
            .zip(params.values())
            .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape());
    if !shapes_match {
        return Err(DmmError::Shape(
            "optimizer state does not match the model".into(),
        ));
    }
    Ok(opt.clone())
}
