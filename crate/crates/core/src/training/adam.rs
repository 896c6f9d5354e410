use dmm_tensor::Tensor;

use crate::error::{invalid, DmmError, Result};
use crate::nn::ParamSet;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid("lr", format!("{lr} must be positive")));
        }
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update to every parameter given gradients in parameter
    /// order.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(DmmError::Shape(format!(
                "adam: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.values().iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(DmmError::Shape(format!(
                    "adam: parameter {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("theta", Tensor::full(&[1], value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(1.5);
        let mut opt = Adam::new(&p, 0.1).unwrap();
        opt.update(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        assert_eq!(p.values()[0].data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 250.0] {
            let mut p = single(0.0);
            let mut opt = Adam::new(&p, 1e-3).unwrap();
            opt.update(&mut p, &[Tensor::full(&[1], g)]).unwrap();
            let delta = p.values()[0].data()[0];
            assert!((delta.abs() - 1e-3).abs() < 1e-9, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = single(0.0);
        let mut opt = Adam::new(&p, 1e-3).unwrap();
        assert!(opt.update(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert!(opt.update(&mut p, &[]).is_err());
        assert!(Adam::new(&p, 0.0).is_err());
    }
}
