//! Trains nothing, just nudges a vanilla adapter by hand and shows that the
//! merged weight reproduces the adapter's evaluation-mode output.

use adapterforge::adapters::{init_adapter, AdapterSpec};
use adapterforge::autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adapterforge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let spec = AdapterSpec::vanilla(2).with_alpha(16.0);
    let mut state = init_adapter(&spec, base, 7)?;
    println!("trainable entries: {}", state.trainable_entries());

    // B starts at zero, so the adapter is initially the identity on W
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let before = state.forward_eval(&x)?.max_abs_diff(&state.base.matmul(&x)?)?;
    println!("deviation from the base at init: {before:.1e}");

    state.heads[0] = Tensor::randn(&[6, 2], 0.1, &mut rng).with_requires_grad(true);
    let merged = state.merge()?;
    let gap = merged.merged.matmul(&x)?.max_abs_diff(&state.forward_eval(&x)?)?;
    println!("scaling α/r = {}", spec.scaling());
    println!("merged vs adapter output: {gap:.1e}");
    Ok(())
}
