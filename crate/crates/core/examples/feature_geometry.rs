//! Projects held-out adapter features of a trained model onto two principal
//! directions and writes them as JSON lines to the path given (or stdout).

use std::fs::File;
use std::io::{self, Write};

use adapterforge::adapters::Variant;
use adapterforge::alignment::AlignMode;
use adapterforge::analysis::{geometry, write_features_jsonl};
use adapterforge::harness::gen_tasks;
use adapterforge::trainer::{heldout_features, train, TrainConfig};

fn main() -> adapterforge::Result<()> {
    let config = TrainConfig { align_mode: AlignMode::Kl, lambda: Some(0.1), seed: Some(0), ..TrainConfig::new(Variant::Vanilla) };
    let (family, splits) = gen_tasks(&config.data)?;
    let (model, _) = train(&config, &family, &splits)?;
    let per_layer = heldout_features(&model, &splits)?;

    let layer: Vec<_> = per_layer[0].iter().collect();
    let report = geometry(&layer, 2000, 0)?;
    println!("centroid distance {:.3}", report.centroid_distance);
    let share = (report.projection.explained[0] + report.projection.explained[1]) / report.projection.total_variance;
    println!("top two components explain {:.1}% of the variance", 100.0 * share);

    let tagged: Vec<_> = layer.iter().copied().enumerate().collect();
    let out: Box<dyn Write> = match std::env::args().nth(1) {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::sink()),
    };
    write_features_jsonl(&tagged, out)
}
