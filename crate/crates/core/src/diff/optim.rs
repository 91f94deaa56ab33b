use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterSet};
use super::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent with a fixed learning rate.
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (sgd | adam)")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Matrix>,
        v: Vec<Matrix>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParameterSet) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Matrix> = params
                    .iter()
                    .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
                    .collect();
                Optimizer::Adam {
                    lr,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                for i in 0..params.len() {
                    let g = grads.get(i);
                    for (p, d) in params.tensor_mut(i).data_mut().iter_mut().zip(g.data()) {
                        *p -= *lr * d;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for i in 0..params.len() {
                    let g = grads.get(i).data();
                    let mi = m[i].data_mut();
                    let vi = v[i].data_mut();
                    let p = params.tensor_mut(i).data_mut();
                    for k in 0..p.len() {
                        mi[k] = *beta1 * mi[k] + (1.0 - *beta1) * g[k];
                        vi[k] = *beta2 * vi[k] + (1.0 - *beta2) * g[k] * g[k];
                        let mhat = mi[k] / c1;
                        let vhat = vi[k] / c2;
                        p[k] -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = ParameterSet::new(0);
        p.insert("w", Matrix::scalar(1.0)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(0, &Matrix::scalar(2.0));
        Optimizer::new(OptimizerKind::Sgd, 0.1, &p).step(&mut p, &g);
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = ParameterSet::new(0);
        p.insert("w", Matrix::scalar(1.0)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(0, &Matrix::scalar(-5.0));
        Optimizer::new(OptimizerKind::Adam, 0.01, &p).step(&mut p, &g);
        assert!((p.get("w").unwrap().item() - 1.01).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = ParameterSet::new(0);
        p.insert("w", Matrix::zeros(1, 2)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(0, &Matrix::row_vector(&[3.0, 4.0]));
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
