//! Compares how alike the heads end up for the summed and randomized
//! multi-head variants. Pass a seed count as the first argument (default 2).

use adapterforge::adapters::Variant;
use adapterforge::trainer::{run, TrainConfig};

fn main() -> adapterforge::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    for variant in [Variant::MultiHeadSum, Variant::MultiHeadRandomized] {
        let mut total = 0.0;
        for seed in 0..seeds {
            let config = TrainConfig { rank: 8, num_heads: 3, seed: Some(seed), ..TrainConfig::new(variant) };
            let (_, report) = run(&config)?;
            let sim = report.summary.head_similarity.expect("multi-head run");
            println!("{variant} seed {seed}: off-diagonal mean {:.4}, accuracy {:.4}", sim.pooled_mean, report.summary.mean_accuracy);
            total += sim.pooled_mean;
        }
        println!("{variant}: mean {:.4}", total / seeds as f64);
    }
    Ok(())
}
