//! Layer descriptors. A spec names its parameters inside a [`ParamSet`]
//! (`{prefix}.w` / `{prefix}.b` for dense, `{prefix}.k` / `{prefix}.b` for
//! conv) and provides both a plain forward and a taped forward built on the
//! same kernels.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::init::orthogonal_init;
use crate::numerics::kernels::{self, Activation};
use crate::numerics::params::ParamSet;
use crate::numerics::tape::{TapeBinder, ValueId};
use crate::numerics::tensor::{Scalar, Tensor};

pub use crate::numerics::kernels::Activation as Act;

/// Dense layer: y = act(x · Wᵀ + b), weight [out, in], bias [out].
#[derive(Debug, Clone)]
pub struct DenseSpec {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl DenseSpec {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, act: Activation) -> Self {
        DenseSpec {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            act,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    /// Insert freshly initialized parameters. Relu layers use gain √2,
    /// output heads pass a small gain explicitly.
    pub fn init<S: Scalar>(
        &self,
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        gain: f64,
        frozen: bool,
    ) -> Result<()> {
        let w = orthogonal_init::<S>(self.out_dim, self.in_dim, gain, rng);
        params.insert(&self.weight_name(), w, frozen)?;
        params.insert(&self.bias_name(), Tensor::zeros(&[self.out_dim]), frozen)?;
        Ok(())
    }

    pub fn default_gain(&self) -> f64 {
        match self.act {
            Activation::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }

    pub fn forward_plain<S: Scalar>(&self, params: &ParamSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        kernels::affine(
            x,
            params.tensor(&self.weight_name())?,
            params.tensor(&self.bias_name())?,
            self.act,
        )
    }

    pub fn forward_tape<S: Scalar>(
        &self,
        binder: &mut TapeBinder<'_, S>,
        x: ValueId,
    ) -> Result<ValueId> {
        let w = binder.bind(&self.weight_name())?;
        let b = binder.bind(&self.bias_name())?;
        let pre = binder.tape.affine(x, w, b)?;
        Ok(binder.tape.act(pre, self.act))
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Conv layer: cross-correlation with stride/padding, bias per channel,
/// elementwise activation. Kernels [out_ch, in_ch, kh, kw].
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub act: Activation,
}

impl ConvSpec {
    pub fn new(
        prefix: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        act: Activation,
    ) -> Self {
        ConvSpec {
            prefix: prefix.into(),
            in_ch,
            out_ch,
            ksize,
            stride,
            pad,
            act,
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.k", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init<S: Scalar>(
        &self,
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        gain: f64,
        frozen: bool,
    ) -> Result<()> {
        let fan = self.in_ch * self.ksize * self.ksize;
        let flat = orthogonal_init::<S>(self.out_ch, fan, gain, rng);
        let k = flat.reshape(&[self.out_ch, self.in_ch, self.ksize, self.ksize])?;
        params.insert(&self.kernel_name(), k, frozen)?;
        params.insert(&self.bias_name(), Tensor::zeros(&[self.out_ch]), frozen)?;
        Ok(())
    }

    pub fn default_gain(&self) -> f64 {
        match self.act {
            Activation::Relu => std::f64::consts::SQRT_2,
            _ => 1.0,
        }
    }

    pub fn out_size(&self, input: usize) -> Result<usize> {
        kernels::conv_out_size(input, self.ksize, self.stride, self.pad)
    }

    pub fn forward_plain<S: Scalar>(&self, params: &ParamSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        kernels::conv2d(
            x,
            params.tensor(&self.kernel_name())?,
            params.tensor(&self.bias_name())?,
            self.stride,
            self.pad,
            self.act,
        )
    }

    pub fn forward_tape<S: Scalar>(
        &self,
        binder: &mut TapeBinder<'_, S>,
        x: ValueId,
    ) -> Result<ValueId> {
        let k = binder.bind(&self.kernel_name())?;
        let b = binder.bind(&self.bias_name())?;
        let pre = binder.tape.conv2d(x, k, b, self.stride, self.pad)?;
        Ok(binder.tape.act(pre, self.act))
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.ksize * self.ksize + self.out_ch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn dense_identity_case() {
        let spec = DenseSpec::new("d", 2, 2, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        params
            .insert("d.w", Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap(), false)
            .unwrap();
        params.insert("d.b", Tensor::zeros(&[2]), false).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![3., -1.]).unwrap();
        let y = spec.forward_plain(&params, &x).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn dense_hand_arithmetic() {
        let spec = DenseSpec::new("d", 2, 2, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        params
            .insert("d.w", Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap(), false)
            .unwrap();
        params.insert("d.b", Tensor::zeros(&[2]), false).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1., 1.]).unwrap();
        let y = spec.forward_plain(&params, &x).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_shape_mismatch_errors() {
        let spec = DenseSpec::new("d", 3, 2, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        spec.init(&mut params, &mut stream(0, &[]), 1.0, false).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 4]);
        assert!(spec.forward_plain(&params, &x).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = ConvSpec::new("c", 1, 1, 1, 1, 0, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        params
            .insert("c.k", Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(), false)
            .unwrap();
        params.insert("c.b", Tensor::zeros(&[1]), false).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = spec.forward_plain(&params, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_sum_kernel_collapses_to_scalar() {
        let spec = ConvSpec::new("c", 1, 1, 3, 1, 0, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        params
            .insert("c.k", Tensor::filled(&[1, 1, 3, 3], 1.0), false)
            .unwrap();
        params.insert("c.b", Tensor::zeros(&[1]), false).unwrap();
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = spec.forward_plain(&params, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let spec = ConvSpec::new("c", 1, 1, 5, 1, 0, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        spec.init(&mut params, &mut stream(0, &[]), 1.0, false).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(spec.forward_plain(&params, &x).is_err());
    }
}
