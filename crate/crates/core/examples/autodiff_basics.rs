//! Builds a small program on the tape, backpropagates, and checks the result
//! against central differences.

use adapterforge::autodiff::{grad_check, Tape, Tensor};

fn main() -> adapterforge::Result<()> {
    let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]])?;
    let x = Tensor::from_rows(&[vec![1.0], vec![3.0]])?;

    let mut tape = Tape::new();
    let wv = tape.leaf(&w.clone().with_requires_grad(true));
    let xv = tape.constant(x.clone());
    let h = tape.matmul(wv, xv)?;
    let h = tape.relu(h)?;
    let loss = tape.sum(h)?;
    let grads = tape.backward(loss)?;
    println!("loss = {}", tape.scalar(loss));
    println!("dL/dW = {:?}", grads.get(wv));

    let report = grad_check(&[w], 1e-6, |tape, p| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(p[0], xv)?;
        let h = tape.square(h)?;
        tape.sum(h)
    })?;
    println!("max relative error vs central differences: {:.2e}", report.max_rel_error);
    Ok(())
}
