use dmm_tensor::{BackwardContext, Operation, Tape, Tensor, Var};

use crate::error::{DmmError, Result};

/// Guard added under the square root of the correlation denominator.
pub const NCC_EPS: f64 = 1e-8;

fn same_batch(tape: &Tape, a: Var, b: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
    tape.check(a)?;
    tape.check(b)?;
    let dims = tape.value(a).dims4("loss")?;
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(DmmError::Shape(format!(
            "{op}: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(dims)
}

struct NccStats {
    s_ab: f64,
    s_aa: f64,
    s_bb: f64,
    mean_a: f64,
    mean_b: f64,
}

impl NccStats {
    fn new(a: &[f64], b: &[f64]) -> Self {
        let m = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / m;
        let mean_b = b.iter().sum::<f64>() / m;
        let (mut s_ab, mut s_aa, mut s_bb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (da, db) = (x - mean_a, y - mean_b);
            s_ab += da * db;
            s_aa += da * da;
            s_bb += db * db;
        }
        Self {
            s_ab,
            s_aa,
            s_bb,
            mean_a,
            mean_b,
        }
    }

    fn denom(&self) -> f64 {
        (self.s_aa * self.s_bb + NCC_EPS).sqrt()
    }

    fn zncc(&self) -> f64 {
        self.s_ab / self.denom()
    }
}

struct NccOp {
    samples: usize,
}

impl Operation for NccOp {
    fn name(&self) -> &'static str {
        "ncc_loss"
    }

    fn backward(
        &self,
        ctx: &BackwardContext<'_>,
        grad: &Tensor,
    ) -> dmm_tensor::Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.input(0), ctx.input(1));
        let per = a.len() / self.samples;
        let scale = -grad.data()[0] / self.samples as f64;
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        for s in 0..self.samples {
            let r = s * per..(s + 1) * per;
            let (pa, pb) = (&a.data()[r.clone()], &b.data()[r.clone()]);
            let st = NccStats::new(pa, pb);
            let d = st.denom();
            let d3 = d * d * d;
            for (k, (x, y)) in pa.iter().zip(pb).enumerate() {
                let (da, db) = (x - st.mean_a, y - st.mean_b);
                ga[r.start + k] = scale * (db / d - st.s_ab * st.s_bb * da / d3);
                gb[r.start + k] = scale * (da / d - st.s_ab * st.s_aa * db / d3);
            }
        }
        Ok(vec![
            Some(Tensor::new(a.shape(), ga).expect("shape")),
            Some(Tensor::new(b.shape(), gb).expect("shape")),
        ])
    }
}

/// `1 − ZNCC(a, b)` per sample of `(n, c, h, w)`, averaged over the batch.
pub fn ncc_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, ..) = same_batch(tape, a, b, "ncc_loss")?;
    let per = tape.value(a).len() / n;
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    let total: f64 = (0..n)
        .map(|s| {
            1.0 - NccStats::new(&av[s * per..(s + 1) * per], &bv[s * per..(s + 1) * per]).zncc()
        })
        .sum();
    Ok(tape.record(
        NccOp { samples: n },
        &[a, b],
        Tensor::scalar(total / n as f64),
    )?)
}

struct IgOp {
    dims: (usize, usize, usize, usize),
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Operation for IgOp {
    fn name(&self) -> &'static str {
        "ig_loss"
    }

    fn backward(
        &self,
        ctx: &BackwardContext<'_>,
        grad: &Tensor,
    ) -> dmm_tensor::Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = self.dims;
        let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
        let planes = (n * c) as f64;
        let gx = grad.data()[0] / (planes * (h * (w - 1)) as f64);
        let gy = grad.data()[0] / (planes * ((h - 1) * w) as f64);
        let mut gd = vec![0.0; a.len()];
        for p in 0..n * c {
            let base = p * h * w;
            let d = |k: usize| a[base + k] - b[base + k];
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    if j + 1 < w {
                        let s = gx * sign(d(k + 1) - d(k));
                        gd[base + k + 1] += s;
                        gd[base + k] -= s;
                    }
                    if i + 1 < h {
                        let s = gy * sign(d(k + w) - d(k));
                        gd[base + k + w] += s;
                        gd[base + k] -= s;
                    }
                }
            }
        }
        let shape = ctx.input(0).shape();
        let neg = gd.iter().map(|v| -v).collect();
        Ok(vec![
            Some(Tensor::new(shape, gd).expect("shape")),
            Some(Tensor::new(shape, neg).expect("shape")),
        ])
    }
}

/// Mean absolute difference of forward-difference image gradients:
/// the horizontal term averages over the `h·(w−1)` valid positions, the
/// vertical term over `(h−1)·w`, and the two are summed. Averaged over the
/// batch and channels.
pub fn ig_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let dims = same_batch(tape, a, b, "ig_loss")?;
    let (n, c, h, w) = dims;
    if h < 2 || w < 2 {
        return Err(DmmError::Shape(format!(
            "ig_loss needs at least 2x2 images, got {h}x{w}"
        )));
    }
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    let mut total = 0.0;
    for p in 0..n * c {
        let base = p * h * w;
        let d = |k: usize| av[base + k] - bv[base + k];
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if j + 1 < w {
                    sx += (d(k + 1) - d(k)).abs();
                }
                if i + 1 < h {
                    sy += (d(k + w) - d(k)).abs();
                }
            }
        }
        total += sx / (h * (w - 1)) as f64 + sy / ((h - 1) * w) as f64;
    }
    let value = Tensor::scalar(total / (n * c) as f64);
    Ok(tape.record(IgOp { dims }, &[a, b], value)?)
}

/// `ncc_loss + ig_loss` between the fully warped source and the target.
pub fn morph_loss(tape: &mut Tape, warped: Var, target: Var) -> Result<Var> {
    let ncc = ncc_loss(tape, warped, target)?;
    let ig = ig_loss(tape, warped, target)?;
    Ok(tape.add(ncc, ig)?)
}
