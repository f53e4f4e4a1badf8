use ndarray::Array2;
use std::time::Instant;

fn main() {
    for &(m, k, n, reps) in &[(8usize, 48usize, 256usize, 20000usize), (16, 128, 64, 20000), (32, 256, 16, 20000), (64, 512, 66, 4000), (512, 64, 66, 4000)] {
        let a = Array2::<f64>::from_elem((m, k), 0.5);
        let b = Array2::<f64>::from_elem((k, n), 0.25);
        let t = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps {
            let c = a.dot(&b);
            acc += c[[0, 0]];
        }
        let dt = t.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * n * reps) as f64;
        println!("f64 {}x{}x{} reps {}: {:.3}s  {:.2} GFLOP/s (acc {})", m, k, n, reps, dt, flops / dt / 1e9, acc);
    }
    for &(m, k, n, reps) in &[(8usize, 48usize, 256usize, 20000usize), (64, 512, 66, 4000)] {
        let a = Array2::<f32>::from_elem((m, k), 0.5);
        let b = Array2::<f32>::from_elem((k, n), 0.25);
        let t = Instant::now();
        let mut acc = 0.0f32;
        for _ in 0..reps {
            let c = a.dot(&b);
            acc += c[[0, 0]];
        }
        let dt = t.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * n * reps) as f64;
        println!("f32 {}x{}x{} reps {}: {:.3}s  {:.2} GFLOP/s (acc {})", m, k, n, reps, dt, flops / dt / 1e9, acc);
    }
}
