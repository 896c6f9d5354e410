//! Single-head spatial self-attention with a residual connection.

use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

struct SampleCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attended: Vec<f64>,
}

struct SelfAttentionOp {
    cache: Vec<SampleCache>,
}

impl Operation for SelfAttentionOp {
    fn name(&self) -> &'static str {
        "self_attention"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let (n, c, h, w) = x.dims4("self_attention")?;
        let t = h * w;
        let scale = 1.0 / (c as f64).sqrt();
        let wq = Mat::new(ctx.input(1).data(), c, c);
        let wk = Mat::new(ctx.input(2).data(), c, c);
        let wv = Mat::new(ctx.input(3).data(), c, c);
        let wo = Mat::new(ctx.input(4).data(), c, c);

        let mut dx = ctx.needs_grad(0).then(|| grad.clone());
        let mut dws: Vec<Option<Tensor>> = (1..=4)
            .map(|i| ctx.needs_grad(i).then(|| Tensor::zeros(&[c, c])))
            .collect();
        let mut d_att = vec![0.0; t * c];
        let mut d_probs = vec![0.0; t * t];
        let mut dq = vec![0.0; t * c];
        let mut dk = vec![0.0; t * c];
        let mut dv = vec![0.0; t * c];

        for s in 0..n {
            let cache = &self.cache[s];
            let xs = Mat::new(&x.data()[s * c * t..(s + 1) * c * t], c, t);
            let dy = Mat::new(&grad.data()[s * c * t..(s + 1) * c * t], c, t);
            let att = Mat::new(&cache.attended, t, c);
            let probs = Mat::new(&cache.probs, t, t);

            if let Some(dwo) = dws[3].as_mut() {
                gemm(dy, att, dwo.data_mut(), 1.0);
            }
            gemm(dy.t(), wo, &mut d_att, 0.0);
            gemm(
                Mat::new(&d_att, t, c),
                Mat::new(&cache.v, t, c).t(),
                &mut d_probs,
                0.0,
            );
            gemm(probs.t(), Mat::new(&d_att, t, c), &mut dv, 0.0);
            for r in 0..t {
                let p = &cache.probs[r * t..(r + 1) * t];
                let dp = &mut d_probs[r * t..(r + 1) * t];
                let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in dp.iter_mut().zip(p) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let ds = Mat::new(&d_probs, t, t);
            gemm(ds, Mat::new(&cache.k, t, c), &mut dq, 0.0);
            gemm(ds.t(), Mat::new(&cache.q, t, c), &mut dk, 0.0);

            for (slot, d) in dws.iter_mut().take(3).zip([&dq, &dk, &dv]) {
                if let Some(dw) = slot.as_mut() {
                    gemm(Mat::new(d, t, c).t(), xs.t(), dw.data_mut(), 1.0);
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * c * t..(s + 1) * c * t];
                for (wm, d) in [(wq, &dq), (wk, &dk), (wv, &dv)] {
                    gemm(wm.t(), Mat::new(d, t, c).t(), dxs, 1.0);
                }
            }
        }
        let mut out = vec![dx];
        out.extend(dws);
        Ok(out)
    }
}

impl Tape {
    /// `y = x + Wo·(softmax(Q·Kᵀ/√c)·V)` over the `h·w` spatial tokens of
    /// each sample, where `Q`, `K`, `V` are the tokens projected by `wq`,
    /// `wk`, `wv`. All projection weights are `(c, c)`.
    pub fn self_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        for v in [x, wq, wk, wv, wo] {
            self.check(v)?;
        }
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("self_attention")?;
        for p in [wq, wk, wv, wo] {
            let shape = self.value(p).shape();
            if shape.len() != 2 || shape[0] != shape[1] {
                return Err(invalid(
                    "self_attention",
                    format!("projection weights must be square, got {shape:?}"),
                ));
            }
            if shape[0] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "self_attention",
                    lhs: vec![c, c],
                    rhs: shape.to_vec(),
                });
            }
        }
        let t = h * w;
        let scale = 1.0 / (c as f64).sqrt();
        let mats: Vec<Mat<'_>> = [wq, wk, wv, wo]
            .iter()
            .map(|&p| Mat::new(self.value(p).data(), c, c))
            .collect();
        let mut out = xv.data().to_vec();
        let mut cache = Vec::with_capacity(n);
        for s in 0..n {
            let xs = Mat::new(&xv.data()[s * c * t..(s + 1) * c * t], c, t);
            let mut proj = [vec![0.0; t * c], vec![0.0; t * c], vec![0.0; t * c]];
            for (buf, wm) in proj.iter_mut().zip(&mats) {
                gemm(xs.t(), wm.t(), buf, 0.0);
            }
            let [q, k, v] = proj;
            let mut probs = vec![0.0; t * t];
            gemm(Mat::new(&q, t, c), Mat::new(&k, t, c).t(), &mut probs, 0.0);
            for row in probs.chunks_mut(t) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut total = 0.0;
                for e in row.iter_mut() {
                    *e = (*e * scale - max).exp();
                    total += *e;
                }
                for e in row.iter_mut() {
                    *e /= total;
                }
            }
            let mut attended = vec![0.0; t * c];
            gemm(
                Mat::new(&probs, t, t),
                Mat::new(&v, t, c),
                &mut attended,
                0.0,
            );
            gemm(
                mats[3],
                Mat::new(&attended, t, c).t(),
                &mut out[s * c * t..(s + 1) * c * t],
                1.0,
            );
            cache.push(SampleCache {
                q,
                k,
                v,
                probs,
                attended,
            });
        }
        let output = Tensor::from_parts(xv.shape().to_vec(), out);
        self.record(SelfAttentionOp { cache }, &[x, wq, wk, wv, wo], output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_passes_value_projection_through() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, -2.0]).unwrap());
        let wq = tape.constant(Tensor::new(&[2, 2], vec![0.3, 0.1, -0.4, 0.9]).unwrap());
        let wk = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let wv = tape.constant(Tensor::new(&[2, 2], vec![0.5, 0.0, 1.0, -1.0]).unwrap());
        let wo = tape.constant(Tensor::new(&[2, 2], vec![2.0, 1.0, 0.0, 1.0]).unwrap());
        let y = tape.self_attention(x, wq, wk, wv, wo).unwrap();
        // wv·x = [0.5, 3.0]; wo·[0.5, 3.0] = [4.0, 3.0]
        assert_eq!(tape.value(y).data(), &[5.0, 1.0]);
    }

    #[test]
    fn zero_value_projection_is_residual_only() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).cos()));
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| i as f64 * 0.1));
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let y = tape.self_attention(x, w, w, z, w).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn non_square_weights_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.self_attention(x, w, bad, w, w).is_err());
    }
}
