//! Forward/backward compute kernels shared by the plain and taped paths.
//!
//! Accumulation order is part of the contract: every output element of
//! `affine` sums over the inner dimension in ascending order, and every
//! output element of `conv2d` sums over (in-channel, kernel-row, kernel-col)
//! in ascending order, with the bias added once at the end. The naive loop
//! oracles in the test suite follow the same order, so f64 comparisons are
//! exact rather than approximate.

use crate::error::{CoreError, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Elementwise nonlinearity applied after an affine or conv map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(S::ZERO),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// d(act)/dx given the pre-activation x and the output y = act(x).
    #[inline]
    pub fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Activation::Identity => S::ONE,
            Activation::Relu => {
                if x.to_f64() > 0.0 {
                    S::ONE
                } else {
                    S::ZERO
                }
            }
            Activation::Tanh => S::ONE.sub(y.mul(y)),
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y.mul(S::ONE.sub(y)),
        }
    }
}

/// ln(1 + e^x) without overflow on large x or premature underflow on small x.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    if x.to_f64() > 0.0 {
        x.add(x.neg().exp().ln_1p())
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x.to_f64() >= 0.0 {
        S::ONE.div(S::ONE.add(x.neg().exp()))
    } else {
        let e = x.exp();
        e.div(S::ONE.add(e))
    }
}

/// C = A · B for row-major A [m,k], B [k,n].
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return Err(CoreError::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out: Tensor<S> = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut od[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = o.add(av.mul(bv));
            }
        }
    }
    Ok(out)
}

/// C = Aᵀ · B for A [m,p], B [m,n] → [p,n]. Used for weight gradients.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, p) = dims2(a)?;
    let (m2, n) = dims2(b)?;
    if m != m2 {
        return Err(CoreError::Dimension(format!(
            "matmul_tn {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out: Tensor<S> = Tensor::zeros(&[p, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * p..(i + 1) * p];
        let brow = &bd[i * n..(i + 1) * n];
        for (pp, &av) in arow.iter().enumerate() {
            let orow = &mut od[pp * n..(pp + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = o.add(av.mul(bv));
            }
        }
    }
    Ok(out)
}

pub fn transpose2d<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = dims2(a)?;
    let mut out: Tensor<S> = Tensor::zeros(&[n, m]);
    let ad = a.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = ad[i * n + j];
        }
    }
    Ok(out)
}

/// y = act(x · Wᵀ + b) for x [batch,in], w [out,in], b [out].
pub fn affine<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    act: Activation,
) -> Result<Tensor<S>> {
    let (batch, in_dim) = dims2(x)?;
    let (out_dim, in_dim2) = dims2(w)?;
    if in_dim != in_dim2 || b.len() != out_dim {
        return Err(CoreError::Dimension(format!(
            "affine x{:?} w{:?} b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    // Stream rows of Wᵀ so the inner loop is unit-stride over outputs while
    // each output element still accumulates over the input dim in order.
    let wt = transpose2d(w)?;
    let mut out: Tensor<S> = Tensor::zeros(&[batch, out_dim]);
    let xd = x.data();
    let wtd = wt.data();
    let od = out.data_mut();
    for i in 0..batch {
        let xrow = &xd[i * in_dim..(i + 1) * in_dim];
        let orow = &mut od[i * out_dim..(i + 1) * out_dim];
        for (kk, &xv) in xrow.iter().enumerate() {
            let wrow = &wtd[kk * out_dim..(kk + 1) * out_dim];
            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                *o = o.add(xv.mul(wv));
            }
        }
        let bd = b.data();
        for (o, &bv) in orow.iter_mut().zip(bd.iter()) {
            *o = act.apply(o.add(bv));
        }
    }
    Ok(out)
}

/// Pre-activation gradients of `affine`: returns (dx, dw, db).
pub fn affine_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g_pre: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (out_dim, _) = dims2(w)?;
    let dx = matmul(g_pre, w)?;
    let dw = matmul_tn(g_pre, x)?;
    let mut db: Tensor<S> = Tensor::zeros(&[out_dim]);
    let gd = g_pre.data();
    let dbd = db.data_mut();
    for grow in gd.chunks_exact(out_dim) {
        for (d, &g) in dbd.iter_mut().zip(grow.iter()) {
            *d = d.add(g);
        }
    }
    Ok((dx, dw, db))
}

/// Spatial size of a conv output along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(CoreError::Dimension(format!(
            "conv kernel {kernel} larger than padded input {padded}"
        )));
    }
    let out = (padded - kernel) / stride + 1;
    if out < 1 {
        return Err(CoreError::Dimension("conv output size < 1".into()));
    }
    Ok(out)
}

/// Cross-correlation: x [b,ci,h,w], kernels [co,ci,kh,kw], bias [co].
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
    act: Activation,
) -> Result<Tensor<S>> {
    let [b, ci, h, w] = dims4(x)?;
    let [co, ci2, kh, kw] = dims4(kernels)?;
    if ci != ci2 || bias.len() != co {
        return Err(CoreError::Dimension(format!(
            "conv2d x{:?} k{:?} b{:?}",
            x.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    let oh = conv_out_size(h, kh, stride, pad)?;
    let ow = conv_out_size(w, kw, stride, pad)?;
    let mut out: Tensor<S> = Tensor::zeros(&[b, co, oh, ow]);
    let xd = x.data();
    let kd = kernels.data();
    let bd = bias.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oc in 0..co {
            let obase = ((bi * co) + oc) * oh * ow;
            for ic in 0..ci {
                let xbase = ((bi * ci) + ic) * h * w;
                for kr in 0..kh {
                    for kc in 0..kw {
                        let kv = kd[((oc * ci + ic) * kh + kr) * kw + kc];
                        for orow in 0..oh {
                            let ih = (orow * stride + kr) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * w;
                            let orow_base = obase + orow * ow;
                            for ocol in 0..ow {
                                let iw = (ocol * stride + kc) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let v = xd[xrow + iw as usize];
                                let o = &mut od[orow_base + ocol];
                                *o = o.add(kv.mul(v));
                            }
                        }
                    }
                }
            }
            let plane = &mut od[obase..obase + oh * ow];
            let bv = bd[oc];
            for o in plane.iter_mut() {
                *o = act.apply(o.add(bv));
            }
        }
    }
    Ok(out)
}

/// Pre-activation gradients of `conv2d`: returns (dx, dk, db).
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    g_pre: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let [b, ci, h, w] = dims4(x)?;
    let [co, _, kh, kw] = dims4(kernels)?;
    let [_, _, oh, ow] = dims4(g_pre)?;
    let mut dx: Tensor<S> = Tensor::zeros(x.shape());
    let mut dk: Tensor<S> = Tensor::zeros(kernels.shape());
    let mut db: Tensor<S> = Tensor::zeros(&[co]);
    let xd = x.data();
    let kd = kernels.data();
    let gd = g_pre.data();
    let dxd = dx.data_mut();
    let dkd = dk.data_mut();
    let dbd = db.data_mut();
    for bi in 0..b {
        for oc in 0..co {
            let gbase = ((bi * co) + oc) * oh * ow;
            for orow in 0..oh {
                for ocol in 0..ow {
                    let g = gd[gbase + orow * ow + ocol];
                    if g.to_f64() == 0.0 {
                        continue;
                    }
                    dbd[oc] = dbd[oc].add(g);
                    for ic in 0..ci {
                        let xbase = ((bi * ci) + ic) * h * w;
                        for kr in 0..kh {
                            let ih = (orow * stride + kr) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kc in 0..kw {
                                let iw = (ocol * stride + kc) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = xbase + ih as usize * w + iw as usize;
                                let ki = ((oc * ci + ic) * kh + kr) * kw + kc;
                                dxd[xi] = dxd[xi].add(g.mul(kd[ki]));
                                dkd[ki] = dkd[ki].add(g.mul(xd[xi]));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk, db))
}

/// Nearest-neighbor 2x upsampling of [b,c,h,w].
pub fn upsample2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [b, c, h, w] = dims4(x)?;
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..b * c {
        let xb = plane * h * w;
        let ob = plane * 4 * h * w;
        for r in 0..h {
            for col in 0..w {
                let v = xd[xb + r * w + col];
                let o0 = ob + (2 * r) * 2 * w + 2 * col;
                let o1 = ob + (2 * r + 1) * 2 * w + 2 * col;
                od[o0] = v;
                od[o0 + 1] = v;
                od[o1] = v;
                od[o1 + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Backward of `upsample2x`: 2x2 block sum.
pub fn upsample2x_backward<S: Scalar>(g: &Tensor<S>) -> Result<Tensor<S>> {
    let [b, c, h2, w2] = dims4(g)?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let gd = g.data();
    let od = out.data_mut();
    for plane in 0..b * c {
        let gb = plane * h2 * w2;
        let ob = plane * h * w;
        for r in 0..h {
            for col in 0..w {
                let g00 = gd[gb + (2 * r) * w2 + 2 * col];
                let g01 = gd[gb + (2 * r) * w2 + 2 * col + 1];
                let g10 = gd[gb + (2 * r + 1) * w2 + 2 * col];
                let g11 = gd[gb + (2 * r + 1) * w2 + 2 * col + 1];
                od[ob + r * w + col] = g00.add(g01).add(g10).add(g11);
            }
        }
    }
    Ok(out)
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        other => Err(CoreError::Dimension(format!("expected rank 2, got {other:?}"))),
    }
}

fn dims4<S: Scalar>(t: &Tensor<S>) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(CoreError::Dimension(format!("expected rank 4, got {other:?}"))),
    }
}
