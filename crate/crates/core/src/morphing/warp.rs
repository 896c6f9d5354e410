use dmm_tensor::{BackwardContext, Operation, Tape, Tensor, Var};

use super::flow::FlowField;
use crate::error::{DmmError, Result};
use crate::image::Image;

/// Bilinear sample position along one axis, clamped to `[0, len - 1]`.
/// Returns the two taps, the fractional weight of the upper tap and
/// whether the position lay strictly inside the valid range.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
    inside: bool,
}

fn tap(pos: f64, len: usize) -> Tap {
    let max = (len - 1) as f64;
    let inside = pos > 0.0 && pos < max;
    let p = pos.clamp(0.0, max);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    Tap {
        lo,
        hi,
        frac: p - lo as f64,
        inside,
    }
}

fn sample(plane: &[f64], w: usize, ty: Tap, tx: Tap) -> f64 {
    let a = plane[ty.lo * w + tx.lo];
    let b = plane[ty.lo * w + tx.hi];
    let c = plane[ty.hi * w + tx.lo];
    let d = plane[ty.hi * w + tx.hi];
    (1.0 - ty.frac) * ((1.0 - tx.frac) * a + tx.frac * b)
        + ty.frac * ((1.0 - tx.frac) * c + tx.frac * d)
}

fn warp_planes(x: &[f64], flow: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        let dx = &flow[s * 2 * hw..s * 2 * hw + hw];
        let dy = &flow[s * 2 * hw + hw..(s + 1) * 2 * hw];
        for ch in 0..c {
            let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    let ty = tap(i as f64 + dy[k], h);
                    let tx = tap(j as f64 + dx[k], w);
                    out.push(sample(plane, w, ty, tx));
                }
            }
        }
    }
    out
}

struct WarpOp;

impl Operation for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(
        &self,
        ctx: &BackwardContext<'_>,
        grad: &Tensor,
    ) -> dmm_tensor::Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let flow = ctx.input(1);
        let (n, c, h, w) = x.dims4("warp")?;
        let hw = h * w;
        let (xd, fd, g) = (x.data(), flow.data(), grad.data());
        let mut gx = vec![0.0; x.len()];
        let mut gf = vec![0.0; flow.len()];
        for s in 0..n {
            let fbase = s * 2 * hw;
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let plane = &xd[base..base + hw];
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        let go = g[base + k];
                        let ty = tap(i as f64 + fd[fbase + hw + k], h);
                        let tx = tap(j as f64 + fd[fbase + k], w);
                        let (wy, wx) = (ty.frac, tx.frac);
                        let gxp = &mut gx[base..base + hw];
                        gxp[ty.lo * w + tx.lo] += go * (1.0 - wy) * (1.0 - wx);
                        gxp[ty.lo * w + tx.hi] += go * (1.0 - wy) * wx;
                        gxp[ty.hi * w + tx.lo] += go * wy * (1.0 - wx);
                        gxp[ty.hi * w + tx.hi] += go * wy * wx;
                        let a = plane[ty.lo * w + tx.lo];
                        let b = plane[ty.lo * w + tx.hi];
                        let cc = plane[ty.hi * w + tx.lo];
                        let d = plane[ty.hi * w + tx.hi];
                        if tx.inside {
                            gf[fbase + k] += go * ((1.0 - wy) * (b - a) + wy * (d - cc));
                        }
                        if ty.inside {
                            gf[fbase + hw + k] += go * ((1.0 - wx) * (cc - a) + wx * (d - b));
                        }
                    }
                }
            }
        }
        Ok(vec![
            ctx.needs_grad(0)
                .then(|| Tensor::new(x.shape(), gx).expect("shape")),
            ctx.needs_grad(1)
                .then(|| Tensor::new(flow.shape(), gf).expect("shape")),
        ])
    }
}

/// Warps every channel of `x` `(n, c, h, w)` by the per-sample flow
/// `(n, 2, h, w)` (channel 0 = dx, channel 1 = dy), differentiable in both.
pub fn warp_batch(tape: &mut Tape, x: Var, flow: Var) -> Result<Var> {
    tape.check(x)?;
    tape.check(flow)?;
    let (n, c, h, w) = tape.value(x).dims4("warp")?;
    let fshape = tape.value(flow).shape();
    if fshape != [n, 2, h, w] {
        return Err(DmmError::Shape(format!(
            "warp of {:?} by flow {fshape:?}",
            tape.value(x).shape()
        )));
    }
    let out = warp_planes(tape.value(x).data(), tape.value(flow).data(), n, c, h, w);
    let out = Tensor::new(&[n, c, h, w], out)?;
    Ok(tape.record(WarpOp, &[x, flow], out)?)
}

/// Bilinear warp of an image with clamp-to-edge sampling.
pub fn warp(x: &Image, phi: &FlowField) -> Result<Image> {
    if x.dims() != (phi.height(), phi.width()) {
        return Err(DmmError::Shape(format!(
            "warp of {:?} image by {}x{} flow",
            x.dims(),
            phi.height(),
            phi.width()
        )));
    }
    let (h, w) = x.dims();
    let mut flow = phi.dx().to_vec();
    flow.extend_from_slice(phi.dy());
    Image::new(h, w, warp_planes(x.data(), &flow, 1, 1, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_identity() {
        let x = Image::from_fn(5, 4, |y, x| ((y * 7 + x * 3) % 11) as f64 * 0.173 - 0.9);
        assert_eq!(warp(&x, &FlowField::zeros(5, 4)).unwrap(), x);
    }

    #[test]
    fn integer_shift_with_clamp() {
        let x = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = warp(&x, &FlowField::uniform(2, 2, 1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0, 4.0, 4.0]);
        let out = warp(&x, &FlowField::uniform(2, 2, 0.0, -1.0)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn half_pixel_shift() {
        let x = Image::new(1, 2, vec![0.0, 1.0]).unwrap();
        let out = warp(&x, &FlowField::uniform(1, 2, 0.5, 0.0)).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0]);
    }

    #[test]
    fn batch_matches_single_image_warp() {
        let x = Image::from_fn(4, 5, |y, x| (y as f64 * 0.3).sin() + x as f64 * 0.1);
        let phi = FlowField::new(
            4,
            5,
            (0..20).map(|i| (i as f64 * 0.37).sin() * 1.7).collect(),
            (0..20).map(|i| (i as f64 * 0.53).cos() * 1.3).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let fv = tape.constant(FlowField::stack(&[&phi]).unwrap());
        let out = warp_batch(&mut tape, xv, fv).unwrap();
        assert_eq!(tape.value(out).data(), warp(&x, &phi).unwrap().data());
    }
}
