//! Quick throughput probe for the conv kernels (dev aid).

use mvos::scalar::Scalar;
use mvos::tensor::{gradcheck::fill_uniform, Shape, Tape, Tensor};
use std::time::Instant;

fn bench_gemm<E: Scalar>(label: &str, m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![E::from_f64(0.5); m * k];
    let b = vec![E::from_f64(0.25); k * n];
    let mut c = vec![E::ZERO; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        E::gemm(m, k, n, E::ONE, &a, &b, E::ZERO, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("{label}: {m}x{k}x{n} x{reps}: {:.3}s  {:.2} GFLOP/s", dt, flops / dt / 1e9);
}

fn bench_conv<E: Scalar>(label: &str, c_in: usize, c_out: usize, hw: usize, reps: usize) {
    let mut tape = Tape::<E>::new();
    let mut x = Tensor::<E>::zeros(Shape::new(1, c_in, hw, hw));
    fill_uniform(&mut x, -1.0, 1.0, 7);
    let mut w = Tensor::<E>::zeros(Shape::new(c_out, c_in, 3, 3));
    fill_uniform(&mut w, -0.1, 0.1, 8);
    let b = Tensor::<E>::zeros(Shape::new(1, c_out, 1, 1));
    let x = tape.leaf_grad(x);
    let w = tape.leaf_grad(w);
    let b = tape.leaf_grad(b);
    let t0 = Instant::now();
    let mut last = 0;
    for _ in 0..reps {
        last = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64();
    let loss = tape.sum(last).unwrap();
    let t1 = Instant::now();
    tape.backward(loss).unwrap();
    let bwd = t1.elapsed().as_secs_f64();
    let macs = (c_in * c_out * 9 * hw * hw * reps) as f64;
    println!(
        "{label}: conv {c_in}->{c_out} @{hw}x{hw} x{reps}: fwd {:.3}s ({:.2} GFLOP/s) bwd-last {:.4}s",
        fwd,
        2.0 * macs / fwd / 1e9,
        bwd
    );
}

fn main() {
    bench_gemm::<f32>("f32", 64, 576, 576, 200);
    bench_gemm::<f32>("f32", 24, 216, 576, 200);
    bench_gemm::<f64>("f64", 64, 576, 576, 50);
    bench_conv::<f32>("f32", 64, 64, 24, 50);
    bench_conv::<f32>("f32", 16, 16, 96, 50);
    bench_conv::<f32>("f32", 24, 24, 24, 50);
    bench_conv::<f64>("f64", 8, 8, 16, 50);
}
