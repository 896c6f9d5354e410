use dmm_tensor::{Tape, Tensor, Var};

use super::schedule::time_embed;
use crate::error::{DmmError, Result};
use crate::nn::{Attention, Bound, Conv, Dense, Mode, Norm, ParamSet, ResBlock};
use crate::rng::DmmRng;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level; the spatial size halves
    /// between consecutive levels.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub middle_attention: bool,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            middle_attention: true,
            dropout: 0.0,
        }
    }
}

struct Level {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

struct UpLevel {
    blocks: Vec<ResBlock>,
    up: Option<crate::nn::Upsample>,
}

/// U-Net predicting the injected noise from the stack `(x_S, x_T, x_t)`.
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamSet,
    time_dim: usize,
    time_in: Dense,
    time_out: Dense,
    input: Conv,
    levels: Vec<Level>,
    middle: (ResBlock, Option<Attention>, ResBlock),
    ups: Vec<UpLevel>,
    out_norm: Norm,
    output: Conv,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig, rng: &mut DmmRng) -> Result<Self> {
        if config.base_channels == 0 || config.channel_mults.is_empty() || config.res_blocks == 0 {
            return Err(DmmError::InvalidParameter {
                key: "denoiser",
                reason: "base channels, levels and residual blocks must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(DmmError::InvalidParameter {
                key: "dropout",
                reason: format!("{} outside [0, 1)", config.dropout),
            });
        }
        let p = &mut ParamSet::new();
        let c = config.base_channels;
        let time_dim = c;
        let emb_dim = 4 * c;
        let time_in = Dense::new(p, "time.0", time_dim, emb_dim, rng);
        let time_out = Dense::new(p, "time.1", emb_dim, emb_dim, rng);
        let input = Conv::same(p, "input", 3, c, rng);
        let chans: Vec<usize> = config.channel_mults.iter().map(|m| m * c).collect();
        let last = chans.len() - 1;
        let mut levels = Vec::new();
        let mut ch = c;
        for (l, &out) in chans.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                let name = format!("down.{l}.{b}");
                blocks.push(ResBlock::new(
                    p,
                    &name,
                    ch,
                    out,
                    Some(emb_dim),
                    config.dropout,
                    rng,
                ));
                ch = out;
            }
            let down =
                (l < last).then(|| Conv::new(p, &format!("down.{l}.pool"), ch, ch, 3, 2, 1, rng));
            levels.push(Level { blocks, down });
        }
        let middle = (
            ResBlock::new(p, "mid.0", ch, ch, Some(emb_dim), config.dropout, rng),
            config
                .middle_attention
                .then(|| Attention::new(p, "mid.attn", ch, rng)),
            ResBlock::new(p, "mid.1", ch, ch, Some(emb_dim), config.dropout, rng),
        );
        let mut ups = Vec::new();
        for l in (0..chans.len()).rev() {
            let out = chans[l];
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                let c_in = if b == 0 { ch + chans[l] } else { ch };
                let name = format!("up.{l}.{b}");
                blocks.push(ResBlock::new(
                    p,
                    &name,
                    c_in,
                    out,
                    Some(emb_dim),
                    config.dropout,
                    rng,
                ));
                ch = out;
            }
            let up = (l > 0)
                .then(|| crate::nn::Upsample::new(p, &format!("up.{l}.unpool"), ch, ch, rng));
            ups.push(UpLevel { blocks, up });
        }
        let out_norm = Norm::new(p, "out.norm", ch);
        let output = Conv::same(p, "out.conv", ch, 1, rng);
        let params = std::mem::take(p);
        Ok(Self {
            config,
            params,
            time_dim,
            time_in,
            time_out,
            input,
            levels,
            middle,
            ups,
            out_norm,
            output,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.config.channel_mults.len() - 1)
    }

    /// `(n, time_dim)` sinusoidal embeddings of the per-sample steps.
    pub fn embed_steps(&self, steps: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(steps.len() * self.time_dim);
        for &t in steps {
            data.extend(time_embed(t as f64, self.time_dim)?);
        }
        Ok(Tensor::new(&[steps.len(), self.time_dim], data)?)
    }

    /// Predicted noise `(n, 1, h, w)` for `(n, 1, h, w)` inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_noise(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x_s: Var,
        x_target: Var,
        x_t: Var,
        steps: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let shape = tape.value(x_t).shape().to_vec();
        for v in [x_s, x_target] {
            if tape.value(v).shape() != shape.as_slice() {
                return Err(DmmError::Shape(format!(
                    "denoiser inputs {:?} vs {shape:?}",
                    tape.value(v).shape()
                )));
            }
        }
        let (n, c, h, w) = tape.value(x_t).dims4("predict_noise")?;
        let m = self.size_multiple();
        if c != 1 || steps.len() != n || h % m != 0 || w % m != 0 {
            return Err(DmmError::Shape(format!(
                "denoiser expects (n, 1, h, w) with h, w divisible by {m} and n steps; got {shape:?} with {} steps",
                steps.len()
            )));
        }
        let emb = tape.constant(self.embed_steps(steps)?);
        let emb = self.time_in.forward(tape, b, emb)?;
        let emb = tape.swish(emb)?;
        let emb = self.time_out.forward(tape, b, emb)?;
        let temb = tape.swish(emb)?;

        let stacked = tape.concat_channels(&[x_s, x_target, x_t])?;
        let mut h = self.input.forward(tape, b, stacked)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for block in &level.blocks {
                h = block.forward(tape, b, h, Some(temb), mode)?;
            }
            skips.push(h);
            if let Some(down) = &level.down {
                h = down.forward(tape, b, h)?;
            }
        }
        h = self.middle.0.forward(tape, b, h, Some(temb), mode)?;
        if let Some(attn) = &self.middle.1 {
            h = attn.forward(tape, b, h)?;
        }
        h = self.middle.2.forward(tape, b, h, Some(temb), mode)?;
        for up in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_channels(&[h, skip])?;
            for block in &up.blocks {
                h = block.forward(tape, b, h, Some(temb), mode)?;
            }
            if let Some(u) = &up.up {
                h = u.forward(tape, b, h)?;
            }
        }
        let h = self.out_norm.forward(tape, b, h)?;
        let h = tape.swish(h)?;
        self.output.forward(tape, b, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> DenoiserNet {
        let cfg = DenoiserConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            middle_attention: true,
            dropout: 0.0,
        };
        DenoiserNet::new(cfg, &mut rng::stream(1, rng::INIT)).unwrap()
    }

    fn inputs(seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = rng::stream(seed, rng::DATA);
        Tensor::from_fn(&[2, 1, 8, 8], |_| r.random_range(-1.0..1.0))
    }

    fn run(net: &DenoiserNet, trainable: bool) -> (Tape, Bound, Var) {
        let mut tape = Tape::new();
        let b = net.params().bind(&mut tape, trainable);
        let xs = tape.constant(inputs(1));
        let xt = tape.constant(inputs(2));
        let xn = tape.constant(inputs(3));
        let out = net
            .predict_noise(&mut tape, &b, xs, xt, xn, &[3, 150], &mut Mode::Eval)
            .unwrap();
        (tape, b, out)
    }

    #[test]
    fn output_is_single_channel_and_deterministic() {
        let net = small();
        let (t1, _, o1) = run(&net, false);
        let (t2, _, o2) = run(&net, false);
        assert_eq!(t1.value(o1).shape(), &[2, 1, 8, 8]);
        assert!(t1.value(o1).all_finite());
        assert_eq!(t1.value(o1), t2.value(o2));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = small();
        let (mut tape, b, out) = run(&net, true);
        let noise = tape.constant(inputs(4));
        let loss = super::super::diffusion_loss(&mut tape, noise, out).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, &v) in net.params().names().iter().zip(b.vars()) {
            let g = grads.get(v).unwrap();
            assert!(
                g.data().iter().any(|&x| x != 0.0),
                "{name} has zero gradient"
            );
        }
    }

    #[test]
    fn rejects_indivisible_size() {
        let net = small();
        let mut tape = Tape::new();
        let b = net.params().bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 7, 8]));
        assert!(net
            .predict_noise(&mut tape, &b, x, x, x, &[0], &mut Mode::Eval)
            .is_err());
    }
}
