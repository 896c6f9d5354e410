use crate::error::{invalid, Result, TensorError};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

/// Pointwise operation kinds. Binary kinds take two same-shaped operands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Abs,
    Square,
    Sqrt,
    Sigmoid,
    Swish,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct ElementwiseOp(Elementwise);

impl Operation for ElementwiseOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Scale(_) => "scale",
            Elementwise::AddScalar(_) => "add_scalar",
            Elementwise::Abs => "abs",
            Elementwise::Square => "square",
            Elementwise::Sqrt => "sqrt",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Swish => "swish",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let zip_with = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                grad.shape().to_vec(),
                grad.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&g, &v)| f(g, v))
                    .collect(),
            )
        };
        Ok(match self.0 {
            Elementwise::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Elementwise::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Elementwise::Mul => {
                let y = ctx.input(1);
                vec![
                    ctx.needs_grad(0).then(|| zip_with(y, &|g, b| g * b)),
                    ctx.needs_grad(1).then(|| zip_with(x, &|g, a| g * a)),
                ]
            }
            Elementwise::Scale(c) => vec![Some(grad.map(|g| g * c))],
            Elementwise::AddScalar(_) => vec![Some(grad.clone())],
            Elementwise::Abs => vec![Some(zip_with(x, &|g, v| g * sign(v)))],
            Elementwise::Square => vec![Some(zip_with(x, &|g, v| 2.0 * g * v))],
            Elementwise::Sqrt => {
                // d sqrt(v) = 1 / (2 sqrt(v)); infinite at v = 0 is reported by the tape
                let out = zip_with(ctx.output(), &|g, s| g / (2.0 * s));
                if !out.all_finite() {
                    return Err(TensorError::NonFinite {
                        op: "sqrt_backward",
                    });
                }
                vec![Some(out)]
            }
            Elementwise::Sigmoid => vec![Some(zip_with(ctx.output(), &|g, s| g * s * (1.0 - s)))],
            Elementwise::Swish => vec![Some(zip_with(x, &|g, v| {
                let s = sigmoid(v);
                g * (s + v * s * (1.0 - s))
            }))],
        })
    }
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

impl Tape {
    /// Applies a pointwise kind; `y` is required for binary kinds and
    /// ignored otherwise.
    pub fn elementwise(&mut self, kind: Elementwise, x: Var, y: Option<Var>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if kind.is_binary() {
            let y = y.ok_or_else(|| invalid("elementwise", "binary kind needs two operands"))?;
            self.check(y)?;
            let yv = self.value(y);
            if xv.shape() != yv.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "elementwise",
                    lhs: xv.shape().to_vec(),
                    rhs: yv.shape().to_vec(),
                });
            }
            let f: fn(f64, f64) -> f64 = match kind {
                Elementwise::Add => |a, b| a + b,
                Elementwise::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let out = Tensor::from_parts(
                xv.shape().to_vec(),
                xv.data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            );
            return self.record(ElementwiseOp(kind), &[x, y], out);
        }
        let out = match kind {
            Elementwise::Scale(c) => xv.map(|v| v * c),
            Elementwise::AddScalar(c) => xv.map(|v| v + c),
            Elementwise::Abs => xv.map(f64::abs),
            Elementwise::Square => xv.map(|v| v * v),
            Elementwise::Sqrt => {
                if let Some(&bad) = xv.data().iter().find(|&&v| v < 0.0) {
                    return Err(TensorError::NegativeSqrt {
                        op: "sqrt",
                        value: bad,
                    });
                }
                xv.map(f64::sqrt)
            }
            Elementwise::Sigmoid => xv.map(sigmoid),
            Elementwise::Swish => xv.map(|v| v * sigmoid(v)),
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => unreachable!(),
        };
        self.record(ElementwiseOp(kind), &[x], out)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, x, Some(y))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, x, Some(y))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, x, Some(y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(Elementwise::Scale(c), x, None)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(Elementwise::AddScalar(c), x, None)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Abs, x, None)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Square, x, None)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sqrt, x, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, x, None)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Swish, x, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_swish(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    #[test]
    fn swish_at_zero_and_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let y = tape.swish(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - scalar_swish(1.0)).abs() < 1e-15);
        assert!((out[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn add_negation_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.1));
        let nx = tape.neg(x).unwrap();
        let z = tape.add(x, nx).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sqrt_of_negative_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2], vec![4.0, -1.0]).unwrap());
        assert!(matches!(
            tape.sqrt(a),
            Err(TensorError::NegativeSqrt { .. })
        ));
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
