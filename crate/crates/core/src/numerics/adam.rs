use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::numerics::params::{GradSet, ParamSet};
use crate::numerics::tensor::{Scalar, Tensor};

/// Adam optimizer state: per-parameter first/second moments plus the shared
/// step counter and hyperparameters. Moment buffers are created lazily the
/// first time a parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<String, Tensor<S>>,
    v: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<S>, &Tensor<S>)> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }
}

/// One Adam update with bias correction. Only parameters present in `grads`
/// are touched; frozen parameters are rejected outright.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &GradSet<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let one_minus_b1 = S::from_f64(1.0 - state.beta1);
    let one_minus_b2 = S::from_f64(1.0 - state.beta2);
    let step = S::from_f64(state.lr / bc1);
    let inv_sqrt_bc2 = S::from_f64(1.0 / bc2.sqrt());
    let eps = S::from_f64(state.eps);

    for (name, grad) in grads.iter() {
        let param = params.get(name)?;
        if param.frozen {
            return Err(CoreError::Config(format!(
                "gradient supplied for frozen parameter '{name}'"
            )));
        }
        if param.tensor.shape() != grad.shape() {
            return Err(CoreError::Dimension(format!(
                "adam grad shape {:?} vs param {:?} for '{name}'",
                grad.shape(),
                param.tensor.shape()
            )));
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let pt = params.tensor_mut(name)?;
        for ((p, (me, ve)), &ge) in pt
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .zip(grad.data().iter())
        {
            *me = b1.mul(*me).add(one_minus_b1.mul(ge));
            *ve = b2.mul(*ve).add(one_minus_b2.mul(ge).mul(ge));
            let denom = ve.sqrt().mul(inv_sqrt_bc2).add(eps);
            *p = p.sub(step.mul(me.div(denom)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(v), false).unwrap();
        ps
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut ps = one_param(3.5);
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::scalar(0.0));
        let mut st = AdamState::new(0.1);
        adam_step(&mut ps, &gs, &mut st).unwrap();
        assert_eq!(ps.tensor("w").unwrap().item(), 3.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_up_to_eps() {
        // With g = 1 on the first step, bias-corrected m̂/√v̂ = 1, so Δ ≈ −lr.
        let mut ps = one_param(0.0);
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(0.05);
        adam_step(&mut ps, &gs, &mut st).unwrap();
        let w = ps.tensor("w").unwrap().item();
        assert!((w + 0.05).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn descends_a_quadratic() {
        // f(w) = w², from w = 1, lr 0.1: |w| strictly decreases every step.
        let mut ps = one_param(1.0);
        let mut st = AdamState::new(0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = ps.tensor("w").unwrap().item();
            let mut gs = GradSet::new();
            gs.insert("w", Tensor::scalar(2.0 * w));
            adam_step(&mut ps, &gs, &mut st).unwrap();
            let now = ps.tensor("w").unwrap().item().abs();
            assert!(now < prev, "|w| did not decrease: {now} vs {prev}");
            prev = now;
        }
    }

    #[test]
    fn frozen_param_gradient_is_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0), true).unwrap();
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(0.1);
        assert!(adam_step(&mut ps, &gs, &mut st).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = one_param(1.0);
        let mut gs = GradSet::new();
        gs.insert("w", Tensor::zeros(&[2]));
        let mut st = AdamState::new(0.1);
        assert!(matches!(
            adam_step(&mut ps, &gs, &mut st),
            Err(CoreError::Dimension(_))
        ));
    }
}
