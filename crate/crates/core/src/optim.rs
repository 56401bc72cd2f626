//! First-order optimizers over a fixed list of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Result<OptimizerKind> {
        match name {
            "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Validation(format!("unknown optimizer '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum State {
    Sgd { momentum: f64, velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64 },
}

/// Optimizer state for one parameter list. The list's order and extents must
/// stay fixed across steps.
pub struct Optimizer {
    lr: f64,
    state: State,
    steps: u64,
}

impl Optimizer {
    pub fn sgd_momentum(lr: f64, momentum: f64, param_sizes: &[usize]) -> Result<Optimizer> {
        if lr <= 0.0 {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            lr,
            state: State::Sgd {
                momentum,
                velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
            steps: 0,
        })
    }

    pub fn adam(lr: f64, param_sizes: &[usize]) -> Result<Optimizer> {
        if lr <= 0.0 {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            lr,
            state: State::Adam {
                m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
                v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
                t: 0,
            },
            steps: 0,
        })
    }

    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, param_sizes: &[usize]) -> Result<Optimizer> {
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::sgd_momentum(lr, momentum, param_sizes),
            OptimizerKind::Adam => Optimizer::adam(lr, param_sizes),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from each tensor's `grad` slot, then zero the grads.
    /// A non-finite gradient aborts before touching any parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(pos) = p.grad().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter {i} at element {pos}"),
                    step: self.steps,
                });
            }
        }
        match &mut self.state {
            State::Sgd { momentum, velocity } => {
                debug_assert_eq!(velocity.len(), params.len());
                for (p, vel) in params.iter_mut().zip(velocity.iter_mut()) {
                    let grad = p.grad().to_vec();
                    for ((w, v), g) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                        *v = *momentum * *v + g;
                        *w -= self.lr * *v;
                    }
                }
            }
            State::Adam { m, v, t } => {
                *t += 1;
                let t_f = *t as f64;
                let bc1 = 1.0 - ADAM_BETA1.powf(t_f);
                let bc2 = 1.0 - ADAM_BETA2.powf(t_f);
                for ((p, ms), vs) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    let grad = p.grad().to_vec();
                    for (((w, mm), vv), g) in
                        p.data_mut().iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut()).zip(grad)
                    {
                        *mm = ADAM_BETA1 * *mm + (1.0 - ADAM_BETA1) * g;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *mm / bc1;
                        let v_hat = *vv / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        self.steps += 1;
        for p in params.iter_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_definition() {
        let mut p = Tensor::zeros(&[1]);
        p.grad_mut()[0] = 1.0;
        let mut opt = Optimizer::sgd_momentum(0.1, 0.0, &[1]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        for g in [3.7, -0.004, 1e6] {
            let mut p = Tensor::zeros(&[1]);
            p.grad_mut()[0] = g;
            let mut opt = Optimizer::adam(0.001, &[1]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            let expected = -0.001 * g.signum();
            assert!(
                (p.data()[0] - expected).abs() < 1e-6,
                "grad {g} gave {}",
                p.data()[0]
            );
        }
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        let before = p.data().to_vec();
        let mut opt = Optimizer::sgd_momentum(0.1, 0.9, &[2]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::zeros(&[2]);
        p.grad_mut()[1] = f64::NAN;
        let before = p.data().to_vec();
        let mut opt = Optimizer::adam(0.001, &[2]).unwrap();
        let err = opt.step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::zeros(&[1]);
        let mut opt = Optimizer::sgd_momentum(0.1, 0.5, &[1]).unwrap();
        p.grad_mut()[0] = 1.0;
        opt.step(&mut [&mut p]).unwrap();
        let after_one = p.data()[0];
        p.grad_mut()[0] = 1.0;
        opt.step(&mut [&mut p]).unwrap();
        // second velocity = 0.5*1 + 1 = 1.5 -> total -0.1 - 0.15
        assert!((after_one + 0.1).abs() < 1e-15);
        assert!((p.data()[0] + 0.25).abs() < 1e-15);
    }
}
