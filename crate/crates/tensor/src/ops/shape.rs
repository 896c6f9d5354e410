//! Layout operations: channel concatenation, reshape, channel-wise bias,
//! global average pooling, and dropout.

use rand::Rng;

use crate::error::{invalid, Result, TensorError};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

struct ConcatOp {
    channels: Vec<usize>,
}

impl Operation for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c_total, h, w) = grad.dims4("concat_channels")?;
        let hw = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if ctx.needs_grad(i) {
                let mut g = Vec::with_capacity(n * c * hw);
                for s in 0..n {
                    let start = (s * c_total + offset) * hw;
                    g.extend_from_slice(&grad.data()[start..start + c * hw]);
                }
                out.push(Some(Tensor::from_parts(vec![n, c, h, w], g)));
            } else {
                out.push(None);
            }
            offset += c;
        }
        Ok(out)
    }
}

struct ReshapeOp;

impl Operation for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshape(ctx.input(0).shape())?)])
    }
}

struct ChannelBiasOp;

impl Operation for ChannelBiasOp {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = grad.dims4("add_channel_bias")?;
        let hw = h * w;
        let db = ctx.needs_grad(1).then(|| {
            let sums = grad
                .data()
                .chunks(hw)
                .map(|plane| plane.iter().sum())
                .collect();
            Tensor::from_parts(vec![n, c], sums)
        });
        Ok(vec![Some(grad.clone()), db])
    }
}

struct AvgPoolOp;

impl Operation for AvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let (_, _, h, w) = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let mut dx = Vec::with_capacity(x.len());
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

struct DropoutOp {
    /// Per-element multiplier: 0 for dropped entries, 1/(1-p) for kept ones.
    mask: Vec<f64>,
}

impl Operation for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(g, m)| g * m)
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), g))])
    }
}

impl Tape {
    /// Stacks `(n, c_i, h, w)` inputs along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        for &x in xs {
            self.check(x)?;
        }
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4("concat_channels")?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            channels.push(xc);
        }
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(x).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let output = Tensor::from_parts(vec![n, c_total, h, w], out);
        self.record(ConcatOp { channels }, xs, output)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshape(shape)?;
        self.record(ReshapeOp, &[x], out)
    }

    /// Adds a per-sample, per-channel offset `(n, c)` to every pixel of
    /// `(n, c, h, w)`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("add_channel_bias")?;
        let bv = self.value(bias);
        if bv.shape() != [n, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: vec![n, c],
                rhs: bv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (plane, &b) in out.chunks_mut(hw).zip(bv.data()) {
            for v in plane {
                *v += b;
            }
        }
        let output = Tensor::from_parts(vec![n, c, h, w], out);
        self.record(ChannelBiasOp, &[x, bias], output)
    }

    /// Spatial mean `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("global_avg_pool")?;
        if h * w == 0 {
            return Err(TensorError::Empty);
        }
        let hw = h * w;
        let means = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.record(AvgPoolOp, &[x], Tensor::from_parts(vec![n, c], means))
    }

    /// Inverted dropout. With `training == false` or `p == 0` the input is
    /// returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let output = Tensor::from_parts(xv.shape().to_vec(), out);
        self.record(DropoutOp { mask }, &[x], output)
    }
}
