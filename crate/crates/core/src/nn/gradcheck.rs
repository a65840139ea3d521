//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Perturbs `coords` sampled scalars by `±epsilon` and compares
/// `(L(+) - L(-)) / 2ε` with `analytic`. Three quarters of the sample is
/// drawn from coordinates with a non-zero analytic gradient.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: Fn(&P) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Argument(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let n = params.num_scalars();
    if analytic.num_scalars() != n {
        return Err(Error::Argument("gradient layout does not match parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nonzero: Vec<usize> = (0..n).filter(|&i| analytic.get_flat(i) != 0.0).collect();
    let mut picks: Vec<usize> = if nonzero.is_empty() {
        Vec::new()
    } else {
        nonzero
            .choose_multiple(&mut rng, (coords * 3 / 4).min(nonzero.len()))
            .copied()
            .collect()
    };
    while picks.len() < coords.min(n) {
        picks.push(rng.gen_range(0..n));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: picks.len(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in &picks {
        let orig = work.get_flat(i);
        work.set_flat(i, orig + epsilon);
        let plus = loss(&work)?;
        work.set_flat(i, orig - epsilon);
        let minus = loss(&work)?;
        work.set_flat(i, orig);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get_flat(i);
        let err = relative_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while probing coordinate {i}")));
        }
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::TensorView;

    #[derive(Clone)]
    struct V(Vec<f64>);

    impl ParamSet for V {
        fn tensors(&self) -> Vec<TensorView<'_>> {
            vec![TensorView {
                name: "v".into(),
                shape: vec![self.0.len()],
                data: &self.0,
            }]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn linear_loss_is_exact() {
        let w = [0.5, -1.25, 3.0, 0.0];
        let p = V(vec![1.0, 2.0, -3.0, 4.0]);
        let g = V(w.to_vec());
        let rep = finite_difference_check(
            &p,
            &g,
            |q: &V| Ok(q.0.iter().zip(w).map(|(a, b)| a * b).sum()),
            1e-4,
            4,
            0,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = V(vec![1.0, 2.0]);
        let g = V(vec![2.0, 5.0]);
        let rep =
            finite_difference_check(&p, &g, |q: &V| Ok(q.0[0] * q.0[0] + q.0[1] * q.0[1]), 1e-4, 2, 0)
                .unwrap();
        assert!(rep.max_relative_error > 0.1);
    }

    #[test]
    fn epsilon_range_enforced() {
        let p = V(vec![1.0]);
        assert!(finite_difference_check(&p, &p, |_: &V| Ok(0.0), 1e-1, 1, 0).is_err());
    }
}
