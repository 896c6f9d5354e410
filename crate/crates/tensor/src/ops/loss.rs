use crate::error::{invalid, Result};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

struct CrossEntropyOp {
    probs: Vec<f64>,
    targets: Vec<usize>,
}

impl Operation for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let logits = ctx.input(0);
        let k = logits.shape()[1];
        let n = self.targets.len();
        let scale = grad.data()[0] / n as f64;
        let mut d = self.probs.clone();
        for (row, &t) in d.chunks_mut(k).zip(&self.targets) {
            row[t] -= 1.0;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Ok(vec![Some(Tensor::from_parts(logits.shape().to_vec(), d))])
    }
}

impl Tape {
    /// Mean over rows of `-log softmax(logits[i])[targets[i]]` for logits of
    /// shape `(n, classes)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let &[n, k] = lv.shape() else {
            return Err(invalid("cross_entropy", "logits must be (n, classes)"));
        };
        if n == 0 || k == 0 {
            return Err(invalid("cross_entropy", "empty logits"));
        }
        if targets.len() != n {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid(
                "cross_entropy",
                format!("target class {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &t) in lv.data().chunks(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + denom.ln();
            total += log_z - row[t];
            probs.extend(row.iter().map(|v| (v - max).exp() / denom));
        }
        let out = Tensor::scalar(total / n as f64);
        self.record(
            CrossEntropyOp {
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
            out,
        )
    }
}
