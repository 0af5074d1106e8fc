use cdl_core::kernels::{mm_nn, mm_nt, mm_tn};
use std::time::Instant;

fn bench(name: &str, m: usize, k: usize, n: usize, iters: usize, which: u8) {
    let a = vec![1.1f64; m * k];
    let b = vec![0.9f64; if which == 1 { n * k } else { k * n }];
    let mut c = vec![0.0f64; if which == 2 { k * n } else { m * n }];
    let t0 = Instant::now();
    for _ in 0..iters {
        match which {
            0 => mm_nn(&a, &b, m, k, n, &mut c),
            1 => mm_nt(&a, &b, m, k, n, &mut c),
            _ => mm_tn(&a, &b, m, k, n, &mut c),
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n) as f64 * iters as f64;
    println!("{name}: {:.2} Gflop/s", flops / dt / 1e9);
}

fn main() {
    bench("mm_nn 17x64x64 ", 17, 64, 64, 200_000, 0);
    bench("mm_nn 17x64x256", 17, 64, 256, 60_000, 0);
    bench("mm_nn 17x32x32 ", 17, 32, 32, 500_000, 0);
    bench("mm_nt 17x64x25 ", 17, 64, 25, 200_000, 1);
    bench("mm_tn 17x64x64 ", 17, 64, 64, 200_000, 2);
}
