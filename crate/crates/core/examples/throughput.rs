use std::time::Instant;
use wsa_core::numerics::{Activation, ConvSpec, DenseSpec, ParamSet, Tensor};
use wsa_core::rng::stream;

fn main() {
    let mut rng = stream(0, &[]);
    // dense 1152 -> 64 on batch 256 (adapter-scale gemm)
    let spec = DenseSpec::new("d", 1152, 64, Activation::Relu);
    let mut params = ParamSet::<f32>::new();
    spec.init(&mut params, &mut rng, 1.0, false).unwrap();
    let x = Tensor::<f32>::filled(&[256, 1152], 0.5);
    let t0 = Instant::now();
    let iters = 200;
    for _ in 0..iters {
        let y = spec.forward_plain(&params, &x).unwrap();
        std::hint::black_box(y.data()[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 256.0 * 1152.0 * 64.0 * iters as f64;
    println!("dense gemm: {:.2} GFLOP/s ({:.3} ms/iter)", flops / dt / 1e9, dt * 1000.0 / iters as f64);

    // conv 3->16 s2 on 24x24, batch 8 (encoder-scale)
    let cs = ConvSpec::new("c", 3, 16, 3, 2, 1, Activation::Relu);
    let mut cp = ParamSet::<f32>::new();
    cs.init(&mut cp, &mut rng, 1.0, false).unwrap();
    let xi = Tensor::<f32>::filled(&[8, 3, 24, 24], 0.5);
    let t0 = Instant::now();
    let iters = 2000;
    for _ in 0..iters {
        let y = cs.forward_plain(&cp, &xi).unwrap();
        std::hint::black_box(y.data()[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 8.0 * 16.0 * 12.0 * 12.0 * 3.0 * 9.0 * iters as f64;
    println!("conv s2:    {:.2} GFLOP/s ({:.3} ms/iter)", flops / dt / 1e9, dt * 1000.0 / iters as f64);
}
