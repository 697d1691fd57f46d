//! Symmetric KL and multi-kernel MMD between shifted feature clouds.

use adapterforge::alignment::{layer_alignment_loss, mmd2, AlignMode, KernelBank, TaskFeatures, DEFAULT_VARIANCE_FLOOR};
use adapterforge::autodiff::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adapterforge::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let a = Tensor::randn(&[32, 3], 1.0, &mut rng);
        let mut b = Tensor::randn(&[32, 3], 1.0, &mut rng);
        b.data_mut().iter_mut().for_each(|v| *v += shift);

        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let feats = [
            TaskFeatures { task_id: 0, layer_id: 0, features: va },
            TaskFeatures { task_id: 1, layer_id: 0, features: vb },
        ];
        let kl = layer_alignment_loss(&mut tape, AlignMode::Kl, &feats, DEFAULT_VARIANCE_FLOOR)?.expect("two tasks");
        let bank = KernelBank::median_heuristic(&[&a, &b])?;
        let mmd = mmd2(&mut tape, va, vb, &bank)?;
        println!("shift {shift:.1}: kl {:.4}  mmd² {:.4}", tape.scalar(kl), tape.scalar(mmd));
    }
    Ok(())
}
