use std::time::Instant;

fn main() {
    let n = 1 << 20;
    let x: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 8.0 - 4.0).collect();
    let mut y = vec![0.0f64; n];
    let reps = 50;
    let start = Instant::now();
    for _ in 0..reps {
        for (o, &v) in y.iter_mut().zip(&x) {
            *o = v / (1.0 + (-v).exp());
        }
    }
    let dt = start.elapsed().as_secs_f64();
    println!("swish: {:.2} ns/element", dt / (n * reps) as f64 * 1e9);
    println!("checksum {}", y.iter().sum::<f64>());
}
