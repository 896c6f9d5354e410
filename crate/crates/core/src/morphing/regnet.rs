use dmm_tensor::{Tape, Var};

use super::flow::FlowField;
use crate::error::{DmmError, Result};
use crate::image::Image;
use crate::nn::{Bound, Conv, Norm, ParamSet, Upsample};
use crate::rng::DmmRng;

#[derive(Clone, Debug, PartialEq)]
pub struct RegNetConfig {
    pub base_channels: usize,
    pub levels: usize,
    /// Multiplier applied to the Kaiming draw of the output layer so the
    /// untrained network starts near the identity warp.
    pub output_scale: f64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            levels: 3,
            output_scale: 1e-3,
        }
    }
}

/// Conv → GroupNorm → Swish.
struct Block {
    conv: Conv,
    norm: Norm,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        p: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut DmmRng,
    ) -> Self {
        Self {
            conv: Conv::new(p, &format!("{name}.conv"), c_in, c_out, 3, stride, 1, rng),
            norm: Norm::new(p, &format!("{name}.norm"), c_out),
        }
    }

    fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, b, x)?;
        let h = self.norm.forward(tape, b, h)?;
        Ok(tape.swish(h)?)
    }
}

/// U-Net mapping `(x_S, n̂)` to a two-channel displacement field.
pub struct RegNet {
    config: RegNetConfig,
    params: ParamSet,
    input: Block,
    downs: Vec<Block>,
    ups: Vec<(Upsample, Block)>,
    refine: Block,
    output: Conv,
}

impl RegNet {
    pub fn new(config: RegNetConfig, rng: &mut DmmRng) -> Result<Self> {
        if config.base_channels == 0 || config.levels == 0 {
            return Err(DmmError::InvalidParameter {
                key: "regnet",
                reason: "base channels and levels must be positive".into(),
            });
        }
        let p = &mut ParamSet::new();
        let c = config.base_channels;
        let input = Block::new(p, "input", 2, c, 1, rng);
        let mut widths = vec![c];
        let mut downs = Vec::new();
        for l in 0..config.levels {
            let (c_in, c_out) = (widths[l], 2 * c);
            downs.push(Block::new(p, &format!("down.{l}"), c_in, c_out, 2, rng));
            widths.push(c_out);
        }
        let mut ups = Vec::new();
        let mut ch = widths[config.levels];
        for l in (0..config.levels).rev() {
            let up = Upsample::new(p, &format!("up.{l}.unpool"), ch, ch, rng);
            let skip = widths[l];
            let out = widths[l];
            let block = Block::new(p, &format!("up.{l}"), ch + skip, out, 1, rng);
            ups.push((up, block));
            ch = out;
        }
        let refine = Block::new(p, "refine", ch, ch, 1, rng);
        let output = Conv::same(p, "output", ch, 2, rng);
        for w in p.get_mut(output.weight()).data_mut() {
            *w *= config.output_scale;
        }
        let params = std::mem::take(p);
        Ok(Self {
            config,
            params,
            input,
            downs,
            ups,
            refine,
            output,
        })
    }

    pub fn config(&self) -> &RegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.config.levels
    }

    /// Flow `(n, 2, h, w)` for `(n, 1, h, w)` source and predicted noise.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x_s: Var, noise: Var) -> Result<Var> {
        let (n, c, h, w) = tape.value(x_s).dims4("predict_flow")?;
        let m = self.size_multiple();
        if tape.value(noise).shape() != [n, c, h, w] || c != 1 || h % m != 0 || w % m != 0 {
            return Err(DmmError::Shape(format!(
                "registration inputs {:?} and {:?}; need (n, 1, h, w) with h, w divisible by {m}",
                tape.value(x_s).shape(),
                tape.value(noise).shape()
            )));
        }
        let x = tape.concat_channels(&[x_s, noise])?;
        let mut h = self.input.forward(tape, b, x)?;
        let mut skips = vec![h];
        for down in &self.downs {
            h = down.forward(tape, b, h)?;
            skips.push(h);
        }
        skips.pop();
        for (up, block) in &self.ups {
            h = up.forward(tape, b, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_channels(&[h, skip])?;
            h = block.forward(tape, b, h)?;
        }
        h = self.refine.forward(tape, b, h)?;
        self.output.forward(tape, b, h)
    }

    /// Convenience evaluation on single images.
    pub fn predict_flow(&self, x_s: &Image, noise: &Image) -> Result<FlowField> {
        x_s.same_dims(noise)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x_s.to_tensor());
        let nv = tape.constant(noise.to_tensor());
        let out = self.forward(&mut tape, &b, xv, nv)?;
        FlowField::from_tensor(tape.value(out), 0)
    }
}
