use caflow_core::kernels::conv3x3_fwd;
use caflow_core::scalar::Scalar;
use std::time::Instant;

fn main() {
    // Simulate the training hot path: conv 64->64 on (8, 64, 16, 16).
    let (n, c, h, w) = (8usize, 64usize, 16usize, 16usize);
    let x = vec![0.5f32; n * c * h * w];
    let weight = vec![0.01f32; 64 * c * 9];
    let bias = vec![0.0f32; 64];
    let mut out = vec![0.0f32; n * 64 * h * w];
    let flops_per_call = 2.0 * (n * h * w) as f64 * 64.0 * (c * 9) as f64;
    // warmup
    for _ in 0..3 { conv3x3_fwd(&x, n, c, h, w, &weight, &bias, 64, &mut out); }
    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps { conv3x3_fwd(&x, n, c, h, w, &weight, &bias, 64, &mut out); }
    let dt = t0.elapsed().as_secs_f64();
    println!("conv3x3 (8,64,16,16): {:.2} GFLOP/s  ({:.3} ms/call)", flops_per_call * reps as f64 / dt / 1e9, dt * 1e3 / reps as f64);

    // raw gemm: 64 x 576 x 2048
    let (m, k, nn) = (64usize, 576usize, 2048usize);
    let a = vec![0.3f32; m * k];
    let b = vec![0.2f32; k * nn];
    let mut cbuf = vec![0.0f32; m * nn];
    for _ in 0..3 { f32::gemm(m, k, nn, 1.0, &a, &b, 0.0, &mut cbuf); }
    let t0 = Instant::now();
    for _ in 0..reps { f32::gemm(m, k, nn, 1.0, &a, &b, 0.0, &mut cbuf); }
    let dt = t0.elapsed().as_secs_f64();
    println!("sgemm 64x576x2048: {:.2} GFLOP/s", 2.0 * (m * k * nn) as f64 * reps as f64 / dt / 1e9);

    // bigger eval-path conv: (1, 64, 64, 64)
    let (n2, h2, w2) = (1usize, 64usize, 64usize);
    let x2 = vec![0.5f32; n2 * c * h2 * w2];
    let mut out2 = vec![0.0f32; n2 * 64 * h2 * w2];
    for _ in 0..3 { conv3x3_fwd(&x2, n2, c, h2, w2, &weight, &bias, 64, &mut out2); }
    let t0 = Instant::now();
    for _ in 0..reps { conv3x3_fwd(&x2, n2, c, h2, w2, &weight, &bias, 64, &mut out2); }
    let dt = t0.elapsed().as_secs_f64();
    let fl = 2.0 * (n2 * h2 * w2) as f64 * 64.0 * (c * 9) as f64;
    println!("conv3x3 (1,64,64,64): {:.2} GFLOP/s", fl * reps as f64 / dt / 1e9);
}
