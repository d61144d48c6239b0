//! Rough throughput probe for the discriminator-shaped conv workload.

use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sodcod_core::tensor::{Conv2dSpec, Tensor};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-0.1..0.1))
}

fn main() {

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 16usize; // concatenated pred+gt branches of a batch of 8
    let x0 = randn(&[n, 4, 64, 64], &mut rng);
    let w1 = Tensor::leaf(randn(&[64, 4, 3, 3], &mut rng), true);
    let w2 = Tensor::leaf(randn(&[64, 64, 3, 3], &mut rng), true);
    let w3 = Tensor::leaf(randn(&[64, 64, 3, 3], &mut rng), true);
    let w4 = Tensor::leaf(randn(&[64, 64, 3, 3], &mut rng), true);
    let w5 = Tensor::leaf(randn(&[1, 64, 3, 3], &mut rng), true);
    let spec = Conv2dSpec::same(3, 1);

    let iters = 10;
    let fwd = |x: &Tensor<f32>| {
        x.conv2d(&w1, None, spec)
            .leaky_relu(0.2)
            .conv2d(&w2, None, spec)
            .leaky_relu(0.2)
            .conv2d(&w3, None, spec)
            .leaky_relu(0.2)
            .conv2d(&w4, None, spec)
            .leaky_relu(0.2)
            .conv2d(&w5, None, spec)
            .sigmoid()
            .mean_all()
    };
    // constants only: forward compute, no graph
    let start = Instant::now();
    for _ in 0..iters {
        let x = Tensor::constant(x0.clone());
        let w1c = Tensor::constant(w1.value().clone());
        let _ = std::hint::black_box(
            x.conv2d(&w1c, None, spec)
                .leaky_relu(0.2)
                .conv2d(&Tensor::constant(w2.value().clone()), None, spec)
                .leaky_relu(0.2)
                .conv2d(&Tensor::constant(w3.value().clone()), None, spec)
                .leaky_relu(0.2)
                .conv2d(&Tensor::constant(w4.value().clone()), None, spec)
                .leaky_relu(0.2)
                .conv2d(&Tensor::constant(w5.value().clone()), None, spec)
                .sigmoid()
                .mean_all()
                .item(),
        );
    }
    println!("forward only: {:.3} s/iter", start.elapsed().as_secs_f64() / iters as f64);

    let start = Instant::now();
    for _ in 0..iters {
        let x = Tensor::leaf(x0.clone(), true);
        let loss = fwd(&x);
        let grads = loss.backward();
        std::hint::black_box(grads.grad(&w3));
    }
    let dt = start.elapsed().as_secs_f64() / iters as f64;
    // fwd ≈ 0.47 GMAC/img * 16; bwd ≈ 2x fwd
    let gflop = 0.47 * 16.0 * 2.0 * 3.0;
    println!(
        "disc-like fwd+bwd: {:.3} s/iter  (~{:.1} GFLOP/s)",
        dt,
        gflop / dt
    );
}
