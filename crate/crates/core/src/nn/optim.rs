use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment state for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: P,
    pub v: P,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(like: &P) -> Self {
        Self {
            config: AdamConfig::default(),
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// One update of `params` from `grads`.
    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient passed to optimizer".into()));
        }
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        let grad_sizes: Vec<usize> = grads.tensors().iter().map(|t| t.data.len()).collect();
        if sizes != grad_sizes {
            return Err(Error::Argument("gradient shapes do not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let g_views = grads.tensors();
        for (((p, m), v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(g_views.iter())
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                if lr != 0.0 {
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::TensorView;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Vec<f64>);

    impl ParamSet for Scalar {
        fn tensors(&self) -> Vec<TensorView<'_>> {
            vec![TensorView {
                name: "x".into(),
                shape: vec![self.0.len()],
                data: &self.0,
            }]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut p = Scalar(vec![1.5, -2.0]);
        let mut st = AdamState::new(&p);
        st.step(&mut p, &Scalar(vec![0.0, 0.0]), 0.1).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
        st.step(&mut p, &Scalar(vec![3.0, 1.0]), 0.0).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let loss = |x: f64| (x - 3.0) * (x - 3.0);
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        let before = loss(p.0[0]);
        let g = Scalar(vec![2.0 * (p.0[0] - 3.0)]);
        st.step(&mut p, &g, 0.1).unwrap();
        assert!(loss(p.0[0]) < before);
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        assert!(matches!(
            st.step(&mut p, &Scalar(vec![f64::NAN]), 0.1),
            Err(Error::Numeric(_))
        ));
    }
}
