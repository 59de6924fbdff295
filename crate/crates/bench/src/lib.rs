//! Minimal timing helpers shared by the benches.

use std::time::{Duration, Instant};

/// Runs `f` once to warm up, then `iters` times, and returns the median.
pub fn median_time<F: FnMut()>(iters: usize, mut f: F) -> Duration {
    f();
    let mut times: Vec<Duration> = (0..iters.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}

pub fn report(name: &str, d: Duration) {
    println!("{name:<44} {:>10.3} ms", d.as_secs_f64() * 1e3);
}
