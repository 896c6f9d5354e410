use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

struct LinearOp {
    has_bias: bool,
}

impl Operation for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let w = ctx.input(1);
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = w.shape()[0];
        let dy = Mat::new(grad.data(), n, d_out);
        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(dy, Mat::new(w.data(), d_out, d_in), dx.data_mut(), 0.0);
            dx
        });
        let dw = ctx.needs_grad(1).then(|| {
            let mut dw = Tensor::zeros(w.shape());
            gemm(dy.t(), Mat::new(x.data(), n, d_in), dw.data_mut(), 0.0);
            dw
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(ctx.needs_grad(2).then(|| {
                let mut db = vec![0.0; d_out];
                for row in grad.data().chunks(d_out) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                Tensor::from_parts(vec![d_out], db)
            }));
        }
        Ok(out)
    }
}

impl Tape {
    /// Affine map `y = x·Wᵀ + b` for `x` of shape `(n, d_in)`, `W` of shape
    /// `(d_out, d_in)` and optional `b` of shape `(d_out)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let xv = self.value(x);
        let wv = self.value(weight);
        let (&[n, d_in], &[d_out, w_in]) = (xv.shape(), wv.shape()) else {
            return Err(invalid("linear", "expected 2-axis input and weight"));
        };
        if d_in != w_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * d_out];
        gemm(
            Mat::new(xv.data(), n, d_in),
            Mat::new(wv.data(), d_out, d_in).t(),
            &mut out,
            0.0,
        );
        if let Some(b) = bias {
            self.check(b)?;
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: vec![d_out],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(d_out) {
                for (v, b) in row.iter_mut().zip(bv.data()) {
                    *v += b;
                }
            }
        }
        let output = Tensor::from_parts(vec![n, d_out], out);
        let op = LinearOp {
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record(op, &[x, weight, b], output),
            None => self.record(op, &[x, weight], output),
        }
    }
}
