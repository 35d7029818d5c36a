//! Low-rank FOP rank ablation on the MLP.
//!
//! Usage: `cargo run --release -p fop-core --example rank_ablation -- [seeds] [epochs]`
//!
//! Trains one momentum baseline and one FOP run per rank for each seed and
//! prints the final test accuracies with their per-rank medians. Uses MNIST
//! when `FOP_DATA_DIR` holds the IDX files, else the synthetic stand-in.

use std::time::Instant;

use fop_core::harness::{train_on, DataSource, TrainJob};
use fop_core::nn::TrainConfig;
use fop_core::{BaseKind, HyperOptimizer, OptimizerConfig, PreconditionerConfig};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> fop_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr = env_f64("ABLATION_LR", 0.003);
    let rho = env_f64("ABLATION_RHO", 3.0);
    let alpha = env_f64("ABLATION_ALPHA", 0.9);
    let batch = env_f64("ABLATION_BATCH", 100.0) as usize;
    let hyper = match std::env::var("ABLATION_HYPER").as_deref() {
        Ok("adam") => HyperOptimizer::adam(),
        _ => HyperOptimizer::PlainSgd,
    };

    let source = DataSource::Auto.resolve()?;
    let data = source.load()?;
    println!("data: {} train / {} test, {} features", data.0.len(), data.1.len(), data.0.dim());

    // `None` is the full-rank setting: k equals each layer's input dimension
    let ranks: [Option<usize>; 5] = [Some(2), Some(4), Some(8), Some(32), None];
    let mut baseline = Vec::new();
    let mut by_rank = vec![Vec::new(); ranks.len()];
    for seed in 0..seeds {
        let job = |opt: OptimizerConfig| {
            let mut train = TrainConfig::new(epochs, batch, opt);
            train.seed = seed;
            train.snapshot_every = 0;
            TrainJob::new(source.clone(), vec![100, 100, 100], train)
        };
        let start = Instant::now();
        let rec = train_on(&job(OptimizerConfig::momentum(lr, alpha)), &data)?;
        let acc = rec.summary.final_accuracy.unwrap_or(f64::NAN);
        println!("seed {seed} momentum: {acc:.4} ({:.1}s)", start.elapsed().as_secs_f64());
        baseline.push(acc);
        for (i, rank) in ranks.iter().enumerate() {
            let k = rank.unwrap_or(usize::MAX);
            let pre = PreconditionerConfig::low_rank(k, rho).hyper_optimizer(hyper);
            let start = Instant::now();
            let rec = train_on(&job(OptimizerConfig::fop(lr, BaseKind::Momentum { alpha }, pre)), &data)?;
            let acc = rec.summary.final_accuracy.unwrap_or(f64::NAN);
            let label = rank.map_or("full".to_string(), |k| k.to_string());
            println!("seed {seed} rank {label}: {acc:.4} ({:.1}s)", start.elapsed().as_secs_f64());
            by_rank[i].push(acc);
        }
    }
    println!("median momentum: {:.4}", median(baseline));
    for (rank, accs) in ranks.iter().zip(by_rank) {
        let label = rank.map_or("full".to_string(), |k| k.to_string());
        println!("median rank {label}: {:.4}", median(accs));
    }
    Ok(())
}
