//! Sweeps the alignment weight for KL and MMD and reports accuracy and the
//! spread of task centroids in the adapter's latent space.

use adapterforge::adapters::Variant;
use adapterforge::alignment::AlignMode;
use adapterforge::trainer::{run, TrainConfig};

fn main() -> adapterforge::Result<()> {
    for mode in [AlignMode::Kl, AlignMode::Mmd] {
        for lambda in [0.0, 0.05, 0.1, 0.3] {
            let config = TrainConfig { align_mode: mode, lambda: Some(lambda), seed: Some(0), ..TrainConfig::new(Variant::Vanilla) };
            let (_, report) = run(&config)?;
            let s = &report.summary;
            println!(
                "{mode:?} λ={lambda:<4}: accuracy {:.4}, centroid distance {:.3}",
                s.mean_accuracy,
                s.centroid_distance.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
