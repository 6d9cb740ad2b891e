//! Central finite-difference gradient oracle. Test-facing: implementations
//! record a tape and compare its analytic gradients against this.

use crate::error::Result;
use crate::numerics::params::{GradSet, ParamSet};

/// Max over all trainable parameter scalars of
/// |analytic − central-difference| / max(1, |analytic|).
///
/// `f` must be a deterministic function of the parameters. Parameters with
/// no entry in `analytic` are treated as gradient zero.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamSet<f64>,
    analytic: &GradSet<f64>,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    let mut worst = 0.0f64;
    let mut work = params.clone();
    let names: Vec<String> = params.trainable().map(|p| p.name.clone()).collect();
    for name in names {
        let len = params.tensor(&name)?.len();
        for i in 0..len {
            let orig = params.tensor(&name)?.data()[i];
            work.tensor_mut(&name)?.data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn linear_f_is_exact() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[3], vec![1., -2., 0.5]).unwrap(), false)
            .unwrap();
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::filled(&[3], 1.0));
        let err = finite_diff_check(
            |p| Ok(p.tensor("w")?.data().iter().sum()),
            &ps,
            &gs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn quadratic_at_ones() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::filled(&[4], 1.0), false).unwrap();
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::filled(&[4], 2.0));
        let err = finite_diff_check(
            |p| Ok(p.tensor("w")?.data().iter().map(|v| v * v).sum()),
            &ps,
            &gs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn frozen_params_are_not_perturbed() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0), false).unwrap();
        ps.insert("frozen", Tensor::scalar(1.0), true).unwrap();
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::scalar(1.0));
        // f depends on the frozen parameter non-linearly; the check must not
        // flag it because frozen parameters are outside the gradient contract.
        let err = finite_diff_check(
            |p| {
                Ok(p.tensor("w")?.item() + p.tensor("frozen")?.item().powi(3))
            },
            &ps,
            &gs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10);
    }
}
