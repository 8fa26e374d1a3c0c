//! Runs the desk benchmark once and prints loss endpoints and hit rates.
//! Usage: `cargo run --release -p specret-model --example desk [seed]`; without a seed the
//! default config runs unchanged.

use specret_model::benchmark::{run_benchmark, BenchmarkConfig};

fn main() {
    let cfg = match std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        Some(seed) => BenchmarkConfig::default().seeded(seed),
        None => BenchmarkConfig::default(),
    };
    let out = run_benchmark(&cfg).expect("benchmark");
    println!("seconds {:.1}", out.seconds);
    for (name, rep) in [("cond", &out.conditioned), ("uncond", &out.unconditioned)] {
        let first = &rep.records[0].train;
        let last = &rep.records.last().unwrap().train;
        println!(
            "{name} composite {:.4} -> {:.4}",
            first.composite, last.composite
        );
    }
    for c in &out.curves {
        println!(
            "{:<22} α≥{:<5} n={:<4} {:?}",
            c.matcher.label(),
            c.alpha_min,
            c.n_trials,
            c.hit_rate
        );
    }
}
