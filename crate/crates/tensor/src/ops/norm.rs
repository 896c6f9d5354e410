use crate::error::{invalid, Result, TensorError};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

struct GroupNormOp {
    groups: usize,
    /// Normalized activations before the affine transform.
    xhat: Vec<f64>,
    /// 1 / sqrt(var + eps) per (sample, group).
    inv_std: Vec<f64>,
}

impl Operation for GroupNormOp {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let gamma = ctx.input(1).data();
        let (n, c, h, w) = x.dims4("group_norm")?;
        let hw = h * w;
        let cpg = c / self.groups;
        let m = (cpg * hw) as f64;
        let dy = grad.data();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    dgamma[ch] += dy[i] * self.xhat[i];
                    dbeta[ch] += dy[i];
                }
            }
        }

        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = vec![0.0; x.len()];
            for s in 0..n {
                for g in 0..self.groups {
                    let inv = self.inv_std[s * self.groups + g];
                    let start = (s * c + g * cpg) * hw;
                    let end = start + cpg * hw;
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for i in start..end {
                        let ch = (i / hw) % c;
                        let d = dy[i] * gamma[ch];
                        sum_d += d;
                        sum_dx += d * self.xhat[i];
                    }
                    for i in start..end {
                        let ch = (i / hw) % c;
                        let d = dy[i] * gamma[ch];
                        dx[i] = inv / m * (m * d - sum_d - self.xhat[i] * sum_dx);
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        Ok(vec![
            dx,
            ctx.needs_grad(1)
                .then(|| Tensor::from_parts(vec![c], dgamma)),
            ctx.needs_grad(2)
                .then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

impl Tape {
    /// Group normalization over `(n, c, h, w)` with per-channel affine
    /// `gamma`, `beta` of shape `(c)`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{c} channels are not divisible into {groups} groups"),
            ));
        }
        if eps <= 0.0 {
            return Err(invalid("group_norm", "eps must be positive"));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "group_norm",
                    lhs: vec![c],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let hw = h * w;
        let cpg = c / groups;
        let m = (cpg * hw) as f64;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let data = xv.data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; n * groups];
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * cpg) * hw;
                let end = start + cpg * hw;
                let mean = data[start..end].iter().sum::<f64>() / m;
                let var = data[start..end]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / m;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[s * groups + g] = inv;
                for i in start..end {
                    let ch = (i / hw) % c;
                    xhat[i] = (data[i] - mean) * inv;
                    out[i] = xhat[i] * gv[ch] + bv[ch];
                }
            }
        }
        let output = Tensor::from_parts(xv.shape().to_vec(), out);
        self.record(
            GroupNormOp {
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
            output,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4, 3, 3], 2.5));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::full(&[4], 0.3));
        let y = tape.group_norm(x, 2, g, b, DEFAULT_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn single_group_standardizes() {
        // mean 2.5, biased variance 1.25 → (v - 2.5) / sqrt(1.25 + 1e-5)
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::full(&[1], 0.0));
        let y = tape.group_norm(x, 1, g, b, DEFAULT_EPS).unwrap();
        let want = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (got, want) in tape.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let g = tape.constant(Tensor::full(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        assert!(tape.group_norm(x, 4, g, b, DEFAULT_EPS).is_err());
    }
}
