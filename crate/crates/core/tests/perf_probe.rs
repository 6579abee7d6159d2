// Quick throughput probe for the attention-sized kernels; ignored by default.
use intact::gridmath::kernels;
use std::time::Instant;

#[test]
#[ignore]
fn matmul_throughput() {
    let a = vec![0.5f32; 256 * 64];
    let b = vec![0.25f32; 64 * 64];
    let bt = vec![0.25f32; 256 * 64];
    let p = vec![0.1f32; 256 * 256];
    let mut out1 = vec![0.0f32; 256 * 64];
    let mut out2 = vec![0.0f32; 256 * 256];
    let mut out3 = vec![0.0f32; 256 * 64];

    let iters = 2000;
    let t0 = Instant::now();
    for _ in 0..iters {
        kernels::matmul_nn(&a, &b, &mut out1, 256, 64, 64);
        kernels::matmul_nt(&a, &bt, &mut out2, 256, 64, 256);
        kernels::matmul_nn(&p, &a, &mut out3, 256, 256, 64);
        std::hint::black_box(&out3);
    }
    let el = t0.elapsed().as_secs_f64();
    let flops = iters as f64 * 2.0 * (256.0 * 64.0 * 64.0 + 256.0 * 64.0 * 256.0 + 256.0 * 256.0 * 64.0);
    eprintln!("kernel throughput: {:.2} Gflop/s", flops / el / 1e9);

    let mut row = vec![0.3f32; 256];
    let t0 = Instant::now();
    for i in 0..200_000 {
        row[i % 256] = (i % 7) as f32;
        kernels::softmax_row_inplace(&mut row, 1.0);
        std::hint::black_box(&row);
    }
    eprintln!("softmax rows/s: {:.1}M", 0.2 / t0.elapsed().as_secs_f64());
}
