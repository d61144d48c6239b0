//! Orientation probe for the dominant conv GEMM shapes.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn bench(name: &str, m: usize, k: usize, n: usize, iters: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Array2::<f32>::from_shape_simple_fn((m, k), || rng.gen_range(-1.0..1.0));
    let b = Array2::<f32>::from_shape_simple_fn((k, n), || rng.gen_range(-1.0..1.0));
    let cs: Vec<_> = (0..2).map(|_| Array2::<f32>::zeros((m, n))).collect();
    let start = Instant::now();
    let mut cs = cs;
    for _ in 0..iters {
        cs.par_iter_mut().for_each(|c| {
            sodcod_core::tensor::gemm(1.0f32, &a.view(), &b.view(), 0.0, &mut c.view_mut());
        });
    }
    let dt = start.elapsed().as_secs_f64() / (iters * 2) as f64;
    let gf = 2.0 * (m * k * n) as f64 / dt / 1e9 * 2.0; // 2 parallel workers
    println!("{name}: m={m} k={k} n={n}  {:.3} ms  {gf:.1} GF/s", dt * 1e3);
}

fn main() {
    let it = 40;
    bench("fwd  WxCols", 64, 576, 4096, it);
    bench("fwd  ColsTxWT", 4096, 576, 64, it);
    bench("ibwd WTxG  ", 576, 64, 4096, it);
    bench("ibwd GTxW  ", 4096, 64, 576, it);
    bench("wgrd GxColsT", 64, 4096, 576, it);
    bench("wgrd ColsxGT", 576, 4096, 64, it);
}
