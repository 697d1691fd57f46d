//! Vanilla LoRA at a rank that matches a routed multi-head adapter's budget.

use adapterforge::adapters::Variant;
use adapterforge::trainer::{run, TrainConfig};

fn main() -> adapterforge::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let routed = TrainConfig { rank: 2, num_heads: 3, ..TrainConfig::new(Variant::MultiHeadRouted) };
    let budget = routed.trainable_params();
    let rank = (1..=8)
        .find(|&r| TrainConfig { rank: r, ..TrainConfig::new(Variant::Vanilla) }.trainable_params() >= budget)
        .expect("a rank within the layer limits");
    let vanilla = TrainConfig { rank, ..TrainConfig::new(Variant::Vanilla) };
    for config in [&routed, &vanilla] {
        let mut acc = 0.0;
        for seed in 0..seeds {
            acc += run(&TrainConfig { seed: Some(seed), ..config.clone() })?.1.summary.mean_accuracy;
        }
        println!(
            "{} r={} ({} params): mean accuracy {:.4}",
            config.variant,
            config.rank,
            config.trainable_params(),
            acc / seeds as f64
        );
    }
    Ok(())
}
