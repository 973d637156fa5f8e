//! Central finite differences, used as an independent gradient oracle.

use alloc::format;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Central-difference gradient of `loss` at `params`, one coordinate at a time.
pub fn fd_gradient<F>(mut loss: F, params: &ParamStore, epsilon: f64) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("finite-difference epsilon must be positive, got {epsilon}")));
    }
    let mut work = params.clone();
    let mut out = params.zeros_like();
    for i in 0..params.len() {
        for j in 0..params.tensors()[i].len() {
            let orig = params.tensors()[i].data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + epsilon;
            let up = loss(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig - epsilon;
            let down = loss(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Evaluation(format!(
                    "non-finite loss while perturbing `{}`[{j}]",
                    params.name(crate::params::ParamId(i))
                )));
            }
            out.tensors_mut()[i].data_mut()[j] = (up - down) / (2.0 * epsilon);
        }
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)` over all coordinates; 0 when both vanish.
pub fn relative_error(a: &ParamStore, b: &ParamStore) -> f64 {
    let fa = a.flatten();
    let fb = b.flatten();
    let diff: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
    let na: f64 = fa.iter().map(|x| x * x).sum();
    let nb: f64 = fb.iter().map(|x| x * x).sum();
    let scale = crate::math::sqrt(na.max(nb));
    if scale == 0.0 {
        0.0
    } else {
        crate::math::sqrt(diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn linear_function() {
        let g = fd_gradient(|p| Ok(2.0 * p.tensors()[0].data()[0]), &single(0.7), 1e-5).unwrap();
        assert!((g.tensors()[0].data()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn cubic_at_one() {
        let g = fd_gradient(
            |p| {
                let w = p.tensors()[0].data()[0];
                Ok(w * w * w)
            },
            &single(1.0),
            1e-4,
        )
        .unwrap();
        assert!((g.tensors()[0].data()[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite_loss() {
        assert!(fd_gradient(|_| Ok(0.0), &single(1.0), 0.0).is_err());
        assert!(matches!(
            fd_gradient(|_| Ok(f64::INFINITY), &single(1.0), 1e-3),
            Err(Error::Evaluation(_))
        ));
    }
}
