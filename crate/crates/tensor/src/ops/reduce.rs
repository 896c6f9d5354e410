use crate::error::{Result, TensorError};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

struct ReduceOp(Reduction);

impl Operation for ReduceOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let g = grad.data()[0];
        let fill = match self.0 {
            Reduction::Sum => g,
            Reduction::Mean => g / x.len() as f64,
        };
        Ok(vec![Some(Tensor::full(x.shape(), fill))])
    }
}

impl Tape {
    /// Reduces every element to a rank-0 scalar.
    pub fn reduce(&mut self, kind: Reduction, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(TensorError::Empty);
        }
        let total: f64 = xv.data().iter().sum();
        let value = match kind {
            Reduction::Sum => total,
            Reduction::Mean => total / xv.len() as f64,
        };
        self.record(ReduceOp(kind), &[x], Tensor::scalar(value))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, x)
    }
}
