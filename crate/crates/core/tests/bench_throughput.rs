use fundoscope::nn::*;
use fundoscope::Tensor;
use std::time::Instant;

#[test]
#[ignore]
fn conv_throughput() {
    // global-net conv2 analogue: 32->32 channels at 128x128, batch 8
    let x = Tensor::<f32>::from_fn(vec![8, 32, 128, 128], |i| (i % 7) as f32 * 0.1);
    let w = Tensor::<f32>::from_fn(vec![32, 32, 3, 3], |i| (i % 5) as f32 * 0.01);
    let t = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        std::hint::black_box(&y);
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    let flops = 8.0 * 32.0 * 128.0 * 128.0 * 32.0 * 9.0 * 2.0;
    println!("f32 conv fwd: {:.3}s/iter, {:.1} GFLOPS", dt, flops / dt / 1e9);

    let go = Tensor::<f32>::from_fn(vec![8, 32, 128, 128], |i| (i % 3) as f32 * 0.1);
    let t = Instant::now();
    for _ in 0..iters {
        let g = conv2d_backward(&go, &x, &w, 1, 1).unwrap();
        std::hint::black_box(&g);
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("f32 conv bwd: {:.3}s/iter, {:.1} GFLOPS", dt, 2.0 * flops / dt / 1e9);

    let x64 = x.cast::<f64>();
    let w64 = w.cast::<f64>();
    let t = Instant::now();
    for _ in 0..iters {
        let y = conv2d_forward(&x64, &w64, None, 1, 1).unwrap();
        std::hint::black_box(&y);
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("f64 conv fwd: {:.3}s/iter, {:.1} GFLOPS", dt, flops / dt / 1e9);

    // FC-style GEMM: batch 32 x 16384 -> 512
    let xf = Tensor::<f32>::from_fn(vec![32, 16384], |i| (i % 11) as f32 * 0.01);
    let wf = Tensor::<f32>::from_fn(vec![512, 16384], |i| (i % 13) as f32 * 0.001);
    let t = Instant::now();
    for _ in 0..iters {
        let y = linear_forward(&xf, &wf, None).unwrap();
        std::hint::black_box(&y);
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    let flops = 32.0 * 16384.0 * 512.0 * 2.0;
    println!("f32 fc fwd: {:.4}s/iter, {:.1} GFLOPS", dt, flops / dt / 1e9);
}
