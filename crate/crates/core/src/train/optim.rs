//! First-order optimizers and gradient clipping.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    #[serde(rename = "SGD")]
    Sgd,
}

/// Adam moment decay rates and denominator epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        hp: AdamParams,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    /// Adam with zeroed moments shaped like `params`.
    pub fn adam(lr: f64, hp: AdamParams, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Optimizer::Adam {
            lr,
            hp,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, hp: AdamParams, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr, hp, params),
            OptimizerKind::Sgd => Self::sgd(lr),
        }
    }

    /// Applies one update. Every gradient is checked first, so a non-finite
    /// entry leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<(), TrainError> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default()));
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g) {
                        *w -= *lr * d;
                    }
                }
            }
            Optimizer::Adam { lr, hp, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - hp.beta1.powi(*t as i32);
                let c2 = 1.0 - hp.beta2.powi(*t as i32);
                for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = hp.beta1 * *m + (1.0 - hp.beta1) * d;
                        *v = hp.beta2 * *v + (1.0 - hp.beta2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= *lr * m_hat / (v_hat.sqrt() + hp.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(&[1.0, -2.0]);
        let mut opt = Optimizer::adam(1e-3, AdamParams::default(), &p);
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.0, -2.0]);
        match &opt {
            Optimizer::Adam { m, v, .. } => {
                assert_eq!(m[0], vec![0.0, 0.0]);
                assert_eq!(v[0], vec![0.0, 0.0]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g|+eps).
        for g in [1e-3, 0.5, -7.0, 300.0] {
            let mut p = store(&[0.0]);
            let lr = 1e-3;
            let mut opt = Optimizer::adam(lr, AdamParams::default(), &p);
            opt.step(&mut p, &[vec![g]]).unwrap();
            let want = -lr * g / (g.abs() + 1e-8);
            let got = p.tensors()[0].data()[0];
            assert!((got - want).abs() < 1e-15, "{g}: {got} vs {want}");
            assert!((got.abs() - lr).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = store(&[1.0]);
        Optimizer::sgd(0.1).step(&mut p, &[vec![2.0]]).unwrap();
        assert!((p.tensors()[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[1.0]);
        let mut opt = Optimizer::adam(1e-3, AdamParams::default(), &p);
        let e = opt.step(&mut p, &[vec![f64::NAN]]).unwrap_err();
        assert!(e.to_string().contains("\"w\""), "{e}");
        assert_eq!(p.tensors()[0].data(), &[1.0]);
    }

    #[test]
    fn clipping_scales_to_the_limit() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
