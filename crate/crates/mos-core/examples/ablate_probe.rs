//! Scratch probe for tuning the ablation defaults. Not part of the test
//! suite.

use mos_core::trainer::{ablation_suite, Optimizer, ToyDims};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let samples: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(64);
    let seed_base: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);
    let e: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2);

    let dims = ToyDims {
        width: 16,
        depth: 4,
    };
    let seeds: Vec<u64> = (seed_base..seed_base + 8).collect();
    let t0 = std::time::Instant::now();
    let report = ablation_suite(dims, e, samples, 0.0, &seeds, Optimizer::Adam, lr, steps).unwrap();
    println!(
        "steps={steps} lr={lr} samples={samples} seeds={seed_base}.. e={e} elapsed={:.1?} budget={}",
        t0.elapsed(),
        report.budget_params
    );
    for entry in &report.entries {
        println!(
            "  {:>18}  mean {:10.6}  std {:9.6}",
            entry.label, entry.mean, entry.std
        );
    }
    for o in &report.orderings {
        println!(
            "  {} <= {} : {} (lhs {:.6} rhs {:.6} se {:.6})",
            o.lhs, o.rhs, o.satisfied, o.lhs_mean, o.rhs_mean, o.pooled_se
        );
    }
}
