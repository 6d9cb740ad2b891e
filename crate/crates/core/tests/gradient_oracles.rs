//! Independent oracles for the numerics layer.
//!
//! Dense and conv forwards are compared against naive loop implementations
//! with exact f64 equality (both sides accumulate in the same index order).
//! Every differentiable op is checked against central finite differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wsa_core::numerics::{
    adam_step, finite_diff_check, AdamState, Activation, ConvSpec, DenseSpec, GradSet, ParamSet,
    Tape, TapeBinder, Tensor,
};
use wsa_core::rng::stream;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// y[i,o] = act(Σ_k x[i,k]·w[o,k] + b[o]), plain triple loop.
fn naive_dense(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, act: Activation) -> Tensor<f64> {
    let (batch, in_dim) = (x.shape()[0], x.shape()[1]);
    let out_dim = w.shape()[0];
    let mut out = Tensor::zeros(&[batch, out_dim]);
    for i in 0..batch {
        for o in 0..out_dim {
            let mut acc = 0.0;
            for k in 0..in_dim {
                acc += x.data()[i * in_dim + k] * w.data()[o * in_dim + k];
            }
            out.data_mut()[i * out_dim + o] = act.apply(acc + b.data()[o]);
        }
    }
    out
}

/// Six explicit loops over (batch, out-ch, out-h, out-w, in-ch, kernel).
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    pad: usize,
    act: Activation,
) -> Tensor<f64> {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for bi in 0..b {
        for oc in 0..co {
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for kr in 0..kh {
                            for kc in 0..kw {
                                let ih = (orow * stride + kr) as isize - pad as isize;
                                let iw = (ocol * stride + kc) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * ci + ic) * h + ih as usize) * w
                                    + iw as usize]
                                    * k.data()[((oc * ci + ic) * kh + kr) * kw + kc];
                            }
                        }
                    }
                    out.data_mut()[((bi * co + oc) * oh + orow) * ow + ocol] =
                        act.apply(acc + bias.data()[oc]);
                }
            }
        }
    }
    out
}

#[test]
fn dense_forward_matches_naive_oracle_exactly() {
    let mut rng = stream(0, &[10]);
    for trial in 0..20 {
        let batch = 1 + (trial % 5);
        let in_dim = 1 + (trial * 3) % 17;
        let out_dim = 1 + (trial * 5) % 13;
        let spec = DenseSpec::new("d", in_dim, out_dim, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        params
            .insert("d.w", rand_tensor(&[out_dim, in_dim], &mut rng, 1.0), false)
            .unwrap();
        params
            .insert("d.b", rand_tensor(&[out_dim], &mut rng, 1.0), false)
            .unwrap();
        let x = rand_tensor(&[batch, in_dim], &mut rng, 1.0);
        let fast = spec.forward_plain(&params, &x).unwrap();
        let naive = naive_dense(
            &x,
            params.tensor("d.w").unwrap(),
            params.tensor("d.b").unwrap(),
            Activation::Identity,
        );
        assert_eq!(fast.shape(), naive.shape());
        for (a, b) in fast.data().iter().zip(naive.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}");
        }
    }
}

#[test]
fn conv_forward_matches_naive_oracle_exactly() {
    let mut rng = stream(1, &[11]);
    let cases = [
        (1usize, 1usize, 5usize, 5usize, 3usize, 1usize, 0usize),
        (2, 3, 8, 8, 3, 1, 1),
        (1, 2, 9, 7, 3, 2, 1),
        (3, 1, 6, 6, 1, 1, 0),
        (2, 4, 12, 12, 3, 2, 1),
    ];
    for (b, ci, h, w, ks, stride, pad) in cases {
        let co = ci + 1;
        let x = rand_tensor(&[b, ci, h, w], &mut rng, 1.0);
        let k = rand_tensor(&[co, ci, ks, ks], &mut rng, 1.0);
        let bias = rand_tensor(&[co], &mut rng, 1.0);
        let spec = ConvSpec::new("c", ci, co, ks, stride, pad, Activation::Identity);
        let mut params = ParamSet::<f64>::new();
        params.insert("c.k", k.clone(), false).unwrap();
        params.insert("c.b", bias.clone(), false).unwrap();
        let fast = spec.forward_plain(&params, &x).unwrap();
        let naive = naive_conv(&x, &k, &bias, stride, pad, Activation::Identity);
        assert_eq!(fast.shape(), naive.shape());
        for (a, bb) in fast.data().iter().zip(naive.data().iter()) {
            assert_eq!(a.to_bits(), bb.to_bits());
        }
    }
}

/// Taped forward equals plain forward bitwise (shared kernels).
#[test]
fn taped_dense_equals_plain_dense() {
    let mut rng = stream(2, &[12]);
    let spec = DenseSpec::new("d", 9, 6, Activation::Tanh);
    let mut params = ParamSet::<f64>::new();
    spec.init(&mut params, &mut rng, 1.0, false).unwrap();
    let x = rand_tensor(&[4, 9], &mut rng, 1.0);
    let plain = spec.forward_plain(&params, &x).unwrap();
    let mut binder = TapeBinder::new(&params);
    let xid = binder.tape.input(x);
    let yid = spec.forward_tape(&mut binder, xid).unwrap();
    assert_eq!(binder.tape.value(yid).data(), plain.data());
}

fn check_op<F>(label: &str, params: ParamSet<f64>, build: F, tol: f64)
where
    F: Fn(&mut TapeBinder<'_, f64>) -> wsa_core::Result<wsa_core::numerics::ValueId>,
{
    let mut binder = TapeBinder::new(&params);
    let loss = build(&mut binder).unwrap();
    let grads = binder.backward(loss).unwrap();
    let err = finite_diff_check(
        |p| {
            let mut b = TapeBinder::new(p);
            let l = build(&mut b)?;
            Ok(b.tape.value(l).item())
        },
        &params,
        &grads,
        1e-5,
    )
    .unwrap();
    assert!(err <= tol, "{label}: finite-difference error {err} > {tol}");
}

#[test]
fn all_activations_pass_finite_difference_checks() {
    // 20 seeds per activation; relu inputs are kept away from the kink by
    // the magnitude of the random draws.
    for (ai, act) in [
        Activation::Identity,
        Activation::Relu,
        Activation::Tanh,
        Activation::Softplus,
        Activation::Sigmoid,
    ]
    .into_iter()
    .enumerate()
    {
        for seed in 0..20u64 {
            let mut rng = stream(seed, &[20, ai as u64]);
            let spec = DenseSpec::new("d", 5, 4, act);
            let mut params = ParamSet::<f64>::new();
            params
                .insert("d.w", rand_tensor(&[4, 5], &mut rng, 0.8), false)
                .unwrap();
            params
                .insert("d.b", rand_tensor(&[4], &mut rng, 0.3), false)
                .unwrap();
            let x = rand_tensor(&[3, 5], &mut rng, 1.0);
            check_op(
                &format!("dense/{act:?}/seed{seed}"),
                params,
                move |b| {
                    let xid = b.tape.input(x.clone());
                    let y = spec.forward_tape(b, xid)?;
                    Ok(b.tape.mean_all(y))
                },
                1e-4,
            );
        }
    }
}

#[test]
fn conv_passes_finite_difference_checks() {
    for seed in 0..20u64 {
        let mut rng = stream(seed, &[21]);
        let spec = ConvSpec::new("c", 2, 3, 3, 2, 1, Activation::Softplus);
        let mut params = ParamSet::<f64>::new();
        params
            .insert("c.k", rand_tensor(&[3, 2, 3, 3], &mut rng, 0.5), false)
            .unwrap();
        params
            .insert("c.b", rand_tensor(&[3], &mut rng, 0.2), false)
            .unwrap();
        let x = rand_tensor(&[2, 2, 6, 6], &mut rng, 1.0);
        check_op(
            &format!("conv/seed{seed}"),
            params,
            move |b| {
                let xid = b.tape.input(x.clone());
                let y = spec.forward_tape(b, xid)?;
                Ok(b.tape.mean_all(y))
            },
            1e-4,
        );
    }
}

#[test]
fn structural_ops_pass_finite_difference_checks() {
    let mut rng = stream(7, &[22]);
    let w1 = rand_tensor(&[2, 6], &mut rng, 0.7);
    let w2 = rand_tensor(&[2, 6], &mut rng, 0.7);
    let weights = rand_tensor(&[2, 2], &mut rng, 0.5);
    let mut params = ParamSet::<f64>::new();
    params.insert("a", w1, false).unwrap();
    params.insert("b", w2, false).unwrap();
    params.insert("w", weights, false).unwrap();

    // concat → reshape → upsample → mean
    {
        let p = params.clone();
        check_op(
            "concat/reshape/upsample",
            p,
            |b| {
                let a = b.bind("a")?;
                let c = b.bind("b")?;
                let cat = b.tape.concat(&[a, c])?;
                let r = b.tape.reshape(cat, &[2, 1, 3, 4])?;
                let up = b.tape.upsample2x(r)?;
                Ok(b.tape.mean_all(up))
            },
            1e-4,
        );
    }
    // weighted sum with softplus weights through l1 normalization
    {
        let p = params.clone();
        check_op(
            "l1norm/weighted_sum",
            p,
            |b| {
                let a = b.bind("a")?;
                let c = b.bind("b")?;
                let w = b.bind("w")?;
                let wpos = b.tape.act(w, Activation::Softplus);
                let wn = b.tape.l1_normalize_rows(wpos)?;
                let r = b.tape.weighted_sum(wn, &[a, c])?;
                let sq = b.tape.square(r);
                Ok(b.tape.mean_all(sq))
            },
            1e-4,
        );
    }
    // scaled dot + softmax + weighted sum (attention shape)
    {
        let p = params.clone();
        check_op(
            "scaled_dot/softmax",
            p,
            |b| {
                let q = b.bind("w")?; // [2,2] as query
                let a = b.bind("a")?;
                let c = b.bind("b")?;
                let qr = b.tape.reshape(q, &[2, 2])?;
                let a2 = b.tape.reshape(a, &[2, 6])?;
                let c2 = b.tape.reshape(c, &[2, 6])?;
                // project query up by reusing rows: use matmul_nt to form [2,2] logits
                let logits = b.tape.matmul_nt(qr, qr)?;
                let sm = b.tape.softmax_rows(logits)?;
                let r = b.tape.weighted_sum(sm, &[a2, c2])?;
                Ok(b.tape.mean_all(r))
            },
            1e-4,
        );
    }
    // scaled_dot proper
    {
        let p = params.clone();
        check_op(
            "scaled_dot",
            p,
            |b| {
                let a = b.bind("a")?;
                let c = b.bind("b")?;
                let logits = b.tape.scaled_dot(a, &[c, a], 0.40824829)?;
                let sm = b.tape.log_softmax_rows(logits)?;
                Ok(b.tape.mean_all(sm))
            },
            1e-4,
        );
    }
    // elementwise chain: exp, clamp, min, square, sub, mul
    {
        let p = params.clone();
        check_op(
            "elementwise_chain",
            p,
            |b| {
                let a = b.bind("a")?;
                let c = b.bind("b")?;
                let e = b.tape.exp(a);
                let cl = b.tape.clamp(e, 0.8, 1.4);
                let mn = b.tape.min_elem(cl, c)?;
                let sq = b.tape.square(mn);
                let d = b.tape.sub(sq, c)?;
                let m = b.tape.mul(d, d)?;
                let rows = b.tape.sum_rows(m)?;
                let r2 = b.tape.reshape(rows, &[1, 2])?;
                let s = b.tape.sum_all(r2);
                Ok(b.tape.scale(s, 0.25))
            },
            1e-4,
        );
    }
    // l2 normalize + matmul_nt + cross entropy (contrastive shape)
    {
        let p = params;
        check_op(
            "l2norm/xent",
            p,
            |b| {
                let a = b.bind("a")?;
                let c = b.bind("b")?;
                let an = b.tape.l2_normalize_rows(a)?;
                let cn = b.tape.l2_normalize_rows(c)?;
                let logits = b.tape.matmul_nt(an, cn)?;
                let sc = b.tape.scale(logits, 5.0);
                b.tape.cross_entropy_rows(sc, &[0, 1])
            },
            1e-4,
        );
    }
}

#[test]
fn gather_cols_and_entropy_pass_finite_difference() {
    let mut rng = stream(9, &[23]);
    let mut params = ParamSet::<f64>::new();
    params
        .insert("logits", rand_tensor(&[3, 4], &mut rng, 1.0), false)
        .unwrap();
    check_op(
        "gather/logsoftmax/entropy",
        params,
        |b| {
            let l = b.bind("logits")?;
            let lsm = b.tape.log_softmax_rows(l)?;
            let picked = b.tape.gather_cols(lsm, &[1, 0, 3])?;
            let p2 = b.tape.reshape(picked, &[1, 3])?;
            let pick_mean = b.tape.mean_all(p2);
            // entropy term
            let probs = b.tape.softmax_rows(l)?;
            let plogp = b.tape.mul(probs, lsm)?;
            let rows = b.tape.sum_rows(plogp)?;
            let r2 = b.tape.reshape(rows, &[1, 3])?;
            let ent = b.tape.mean_all(r2);
            let combo = b.tape.add(pick_mean, ent)?;
            Ok(b.tape.scale(combo, 1.0))
        },
        1e-4,
    );
}

#[test]
fn frozen_parameters_get_no_gradients_and_never_move() {
    let mut rng = stream(3, &[30]);
    let enc = DenseSpec::new("enc", 6, 5, Activation::Tanh);
    let head = DenseSpec::new("head", 5, 2, Activation::Identity);
    let mut params = ParamSet::<f64>::new();
    enc.init(&mut params, &mut rng, 1.0, true).unwrap();
    head.init(&mut params, &mut rng, 1.0, false).unwrap();
    let before_w = params.tensor("enc.w").unwrap().clone();

    let x = rand_tensor(&[4, 6], &mut rng, 1.0);
    let mut binder = TapeBinder::new(&params);
    let xid = binder.tape.input(x);
    let h = enc.forward_tape(&mut binder, xid).unwrap();
    let y = head.forward_tape(&mut binder, h).unwrap();
    let loss = binder.tape.mean_all(y);
    let grads = binder.backward(loss).unwrap();

    assert!(grads.contains("head.w"));
    assert!(grads.contains("head.b"));
    assert!(!grads.contains("enc.w"), "frozen encoder received a gradient");
    assert!(!grads.contains("enc.b"));

    let mut st = AdamState::new(1e-3);
    adam_step(&mut params, &grads, &mut st).unwrap();
    let after_w = params.tensor("enc.w").unwrap();
    for (a, b) in before_w.data().iter().zip(after_w.data().iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "frozen parameter moved");
    }
}

#[test]
fn loss_sum_of_inputs_has_unit_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(&[2, 3], vec![5., -2., 0., 1., 9., 4.]).unwrap());
    let s = tape.sum_all(x);
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn finite_diff_check_on_linear_and_quadratic() {
    // f = sum of params: error is pure float rounding.
    let mut ps = ParamSet::<f64>::new();
    ps.insert("w", Tensor::from_vec(&[5], vec![0.3, -1.2, 4.0, 0.0, 2.5]).unwrap(), false)
        .unwrap();
    let mut gs = GradSet::new();
    gs.insert("w", Tensor::filled(&[5], 1.0));
    let err = finite_diff_check(|p| Ok(p.tensor("w")?.data().iter().sum()), &ps, &gs, 1e-5).unwrap();
    assert!(err < 1e-10);

    // f = sum of squares at params = 1: analytic gradient 2 everywhere.
    let mut ps = ParamSet::<f64>::new();
    ps.insert("w", Tensor::filled(&[5], 1.0), false).unwrap();
    let mut gs = GradSet::new();
    gs.insert("w", Tensor::filled(&[5], 2.0));
    let err = finite_diff_check(
        |p| Ok(p.tensor("w")?.data().iter().map(|v| v * v).sum()),
        &ps,
        &gs,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8);
}
