//! Routed and top-k adapters in training and evaluation mode, and why they
//! cannot be folded into a single weight.
//!
//! Only the randomized variant drops entries of `A·x` while training, so it
//! is the one whose training output differs from evaluation.

use adapterforge::adapters::{init_adapter, top_k_mask, AdapterSpec, ForwardCtx, Variant};
use adapterforge::autodiff::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adapterforge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
    for variant in [Variant::MultiHeadRouted, Variant::MultiHeadRandomized, Variant::MultiAdapter] {
        let spec = AdapterSpec::new(variant, 2, 3).with_top_k(2).with_dropout(0.5);
        let mut state = init_adapter(&spec, Tensor::randn(&[5, 8], 1.0, &mut rng), 0)?;
        for p in state.params_mut().into_iter().skip(1) {
            let fresh = Tensor::randn(p.shape(), 0.2, &mut rng);
            p.data_mut().copy_from_slice(fresh.data());
        }
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let train = state.forward(&mut tape, &bound, xv, ForwardCtx::train(0, 1, 0))?;
        let eval = state.forward_eval(&x)?;
        println!(
            "{variant}: train/eval gap {:.3}, merge -> {}",
            tape.value(train.out).max_abs_diff(&eval)?,
            state.merge().map(|_| "ok".to_string()).unwrap_or_else(|e| e.to_string())
        );
    }
    // one column of router logits over four heads
    let logits = Tensor::new(&[4, 1], vec![0.3, -1.0, 2.0, 0.5])?;
    println!("top-2 of {:?}: {:?}", logits.data(), top_k_mask(&logits, 2));
    Ok(())
}
