use ecd_peakformer::Mat;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize, ta: bool, tb: bool) {
    let a = if ta { Mat::filled(k, m, 0.5) } else { Mat::filled(m, k, 0.5) };
    let b = if tb { Mat::filled(n, k, 0.25) } else { Mat::filled(k, n, 0.25) };
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..iters {
        let c = a.matmul(ta, &b, tb);
        acc += c.get(0, 0);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * iters) as f64;
    println!("{}x{}x{} ta={} tb={}: {:.2} GFLOP/s (acc {acc:.1})", m, k, n, ta, tb, flops / dt / 1e9);
}

fn main() {
    bench(16, 128, 512, 2000, false, false);
    bench(16, 512, 128, 2000, false, false);
    bench(16, 128, 128, 8000, false, false);
    bench(16, 128, 512, 2000, false, true);
    bench(128, 16, 512, 2000, true, false);
    bench(24, 384, 128, 4000, false, false);
}
