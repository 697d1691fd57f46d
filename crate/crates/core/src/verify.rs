//! Built-in verification suites run by `adapterforge verify`.
//!
//! Each suite checks the library against an independent reference: central
//! differences for gradients, numerical integration for KL, direct kernel
//! sums for MMD, dense products for merging, and realized tensors for
//! parameter counts.

use rand::Rng;

use crate::adapters::{init_adapter, trainable_param_count, AdapterSpec, ForwardCtx, Variant};
use crate::alignment::{kl_diag_gaussian, layer_alignment_loss, mmd2, AlignMode, GaussianStats, KernelBank, TaskFeatures, DEFAULT_VARIANCE_FLOOR};
use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const GRAD_TOL: f64 = 1e-4;
pub const KL_QUADRATURE_TOL: f64 = 1e-3;
pub const KL_CLOSED_FORM_TOL: f64 = 1e-9;
pub const MMD_TOL: f64 = 1e-10;
pub const MERGE_TOL: f64 = 1e-10;
const TRIALS: u64 = 20;

/// Deliberate defects used to check that the suites catch them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Reverse the sign of the KL alignment gradient while keeping its value.
    pub flip_kl_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Runs every suite in a fixed order.
pub fn run_all(faults: Faults) -> Vec<SuiteResult> {
    let suites: [(&'static str, fn(Faults) -> Outcome); 5] = [
        ("grad-check", grad_check_suite),
        ("kl-oracle", |_| kl_oracle_suite()),
        ("mmd-oracle", |_| mmd_oracle_suite()),
        ("merge-identity", |_| merge_suite()),
        ("param-count", |_| param_count_suite()),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f(faults) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult { name, passed, detail }
        })
        .collect()
}

fn heads_for(variant: Variant) -> usize {
    if variant == Variant::Vanilla {
        1
    } else {
        3
    }
}

fn kl_loss(tape: &mut Tape, vars: &[Var], faults: Faults) -> Result<Var> {
    let fs: Vec<TaskFeatures> = vars
        .iter()
        .enumerate()
        .map(|(i, &features)| TaskFeatures {
            task_id: i,
            layer_id: 0,
            features,
        })
        .collect();
    let loss = layer_alignment_loss(tape, AlignMode::Kl, &fs, DEFAULT_VARIANCE_FLOOR)?
        .ok_or_else(|| Error::Config("no alignment loss".into()))?;
    if !faults.flip_kl_gradient {
        return Ok(loss);
    }
    // 2·stop(L) − L has the value of L and the gradient of −L
    let frozen = tape.constant(tape.value(loss).scale(2.0));
    tape.sub(frozen, loss)
}

fn grad_check_suite(faults: Faults) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = stream(1, &[60]);
    for trial in 0..TRIALS {
        for variant in Variant::ALL {
            let spec = AdapterSpec::new(variant, 2, heads_for(variant)).with_top_k(2).with_dropout(0.25);
            let base = Tensor::randn(&[4, 3], 0.5, &mut r);
            let mut state = lib(init_adapter(&spec, base, trial))?;
            for p in state.params_mut() {
                let fresh = Tensor::randn(p.shape(), 0.3, &mut r);
                p.data_mut().copy_from_slice(fresh.data());
            }
            let x = Tensor::randn(&[3, 5], 1.0, &mut r);
            let w = Tensor::randn(&[4, 5], 1.0, &mut r);
            let params: Vec<Tensor> = state.params().into_iter().cloned().collect();
            let ctx = ForwardCtx::train(trial, 3, 1);
            let report = lib(grad_check(&params, 1e-5, |tape, vars| {
                let mut bound = state.bind(tape);
                let (nd, nh) = (bound.down.len(), bound.heads.len());
                bound.down = vars[..nd].to_vec();
                bound.heads = vars[nd..nd + nh].to_vec();
                if bound.router.is_some() {
                    bound.router = Some(vars[nd + nh]);
                }
                let xv = tape.constant(x.clone());
                let out = state.forward(tape, &bound, xv, ctx)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(out.out, wv)?;
                tape.sum(p)
            }))?;
            if report.max_rel_error > GRAD_TOL {
                return Err(format!("{variant} forward, trial {trial}: relative error {:.3e}", report.max_rel_error));
            }
            worst = worst.max(report.max_rel_error);
        }

        let (b1, b2, d) = (r.random_range(3..7), r.random_range(3..7), r.random_range(1..4));
        let feats = vec![
            Tensor::randn(&[b1, d], 1.0, &mut r),
            Tensor::randn(&[b2, d], 1.0, &mut r).add(&Tensor::full(&[b2, d], 0.5)).expect("same shape"),
        ];
        let kl = lib(grad_check(&feats, 1e-5, |tape, v| kl_loss(tape, v, faults)))?;
        if kl.max_rel_error > GRAD_TOL {
            return Err(format!("KL loss, trial {trial}: relative error {:.3e}", kl.max_rel_error));
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        let bank = lib(KernelBank::median_heuristic(&refs))?;
        let mmd = lib(grad_check(&feats, 1e-5, |tape, v| mmd2(tape, v[0], v[1], &bank)))?;
        if mmd.max_rel_error > GRAD_TOL {
            return Err(format!("MMD loss, trial {trial}: relative error {:.3e}", mmd.max_rel_error));
        }
        worst = worst.max(kl.max_rel_error).max(mmd.max_rel_error);
    }
    Ok(format!("{TRIALS} trials per forward and loss, max relative error {worst:.2e}"))
}

/// `D(p‖q)` for univariate Gaussians by Simpson's rule on the log-density ratio.
pub fn kl_quadrature(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    let span = 12.0 * vp.sqrt().max(vq.sqrt()) + (mp - mq).abs();
    let (lo, hi) = (mp.min(mq) - span, mp.max(mq) + span);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let g = |x: f64| {
        let log_p = -(x - mp).powi(2) / (2.0 * vp) - 0.5 * (2.0 * std::f64::consts::PI * vp).ln();
        let log_ratio = 0.5 * (vq / vp).ln() - (x - mp).powi(2) / (2.0 * vp) + (x - mq).powi(2) / (2.0 * vq);
        log_p.exp() * log_ratio
    };
    let mut s = g(lo) + g(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(lo + i as f64 * h);
    }
    s * h / 3.0
}

fn kl_1d(mp: f64, vp: f64, mq: f64, vq: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut stats = |m: f64, v: f64| GaussianStats {
        mu: tape.constant(Tensor::vector(vec![m])),
        var: tape.constant(Tensor::vector(vec![v])),
        count: 0,
    };
    let (p, q) = (stats(mp, vp), stats(mq, vq));
    let k = kl_diag_gaussian(&mut tape, &p, &q)?;
    Ok(tape.scalar(k))
}

fn kl_oracle_suite() -> Outcome {
    let mut r = stream(2, &[60]);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (mp, mq) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let (vp, vq) = (r.random_range(0.2..3.0), r.random_range(0.2..3.0));
        let got = lib(kl_1d(mp, vp, mq, vq))?;
        let want = kl_quadrature(mp, vp, mq, vq);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        if rel > KL_QUADRATURE_TOL {
            return Err(format!("N({mp:.3},{vp:.3}) vs N({mq:.3},{vq:.3}): {got} vs quadrature {want}"));
        }
        worst = worst.max(rel);
    }
    for (args, want) in [((0.0, 1.0, 1.0, 1.0), 0.5), ((0.0, 1.0, 0.0, 2.0), 0.5 * 2f64.ln() - 0.25)] {
        let got = lib(kl_1d(args.0, args.1, args.2, args.3))?;
        if (got - want).abs() > KL_CLOSED_FORM_TOL {
            return Err(format!("closed-form case {args:?}: {got} vs {want}"));
        }
    }
    Ok(format!("{TRIALS} quadrature pairs, max relative error {worst:.2e}; closed forms exact"))
}

/// Biased multi-kernel MMD² as a direct double sum over all pairs.
pub fn mmd2_brute(x: &[Vec<f64>], y: &[Vec<f64>], sigmas: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64], s: f64| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
        (-d / (2.0 * s * s)).exp()
    };
    let mean = |p: &[Vec<f64>], q: &[Vec<f64>], s: f64| {
        p.iter().flat_map(|a| q.iter().map(move |b| k(a, b, s))).sum::<f64>() / (p.len() * q.len()) as f64
    };
    sigmas
        .iter()
        .map(|&s| mean(x, x, s) + mean(y, y, s) - 2.0 * mean(x, y, s))
        .sum()
}

fn mmd_value(x: &Tensor, y: &Tensor, bank: &KernelBank) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let v = mmd2(&mut tape, xv, yv, bank)?;
    Ok(tape.scalar(v))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mmd_oracle_suite() -> Outcome {
    let mut r = stream(3, &[60]);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let d = r.random_range(1..5);
        let x = Tensor::randn(&[r.random_range(1..=32), d], 1.0, &mut r);
        let y = Tensor::randn(&[r.random_range(1..=32), d], 1.5, &mut r);
        let bank = lib(KernelBank::median_heuristic(&[&x, &y]))?;
        let got = lib(mmd_value(&x, &y, &bank))?;
        let want = mmd2_brute(&rows_of(&x), &rows_of(&y), bank.bandwidths());
        if (got - want).abs() > MMD_TOL {
            return Err(format!("sets of {} and {} in dim {d}: {got} vs {want}", x.rows(), y.rows()));
        }
        worst = worst.max((got - want).abs());
    }
    let single = lib(KernelBank::new(vec![1.0]))?;
    let got = lib(mmd_value(&Tensor::zeros(&[1, 1]), &Tensor::full(&[1, 1], 1.0), &single))?;
    let want = 2.0 - 2.0 * (-0.5f64).exp();
    if (got - want).abs() > MMD_TOL {
        return Err(format!("single-kernel case: {got} vs {want}"));
    }
    Ok(format!("{TRIALS} random set pairs, max abs error {worst:.2e}; fixed case exact"))
}

fn merge_suite() -> Outcome {
    let mut r = stream(4, &[60]);
    let mut worst: f64 = 0.0;
    for variant in Variant::ALL {
        let spec = AdapterSpec::new(variant, 3, heads_for(variant));
        let mut state = lib(init_adapter(&spec, Tensor::randn(&[6, 5], 1.0, &mut r), 7))?;
        for p in state.params_mut() {
            let fresh = Tensor::randn(p.shape(), 0.5, &mut r);
            p.data_mut().copy_from_slice(fresh.data());
        }
        match (variant.is_mergeable(), state.merge()) {
            (true, Ok(m)) => {
                let x = Tensor::randn(&[5, 100], 1.0, &mut r);
                let via_merge = lib(m.merged.matmul(&x))?;
                let via_adapter = lib(state.forward_eval(&x))?;
                let dev = lib(via_merge.max_abs_diff(&via_adapter))?;
                if dev > MERGE_TOL {
                    return Err(format!("{variant}: merged output deviates by {dev:.3e}"));
                }
                worst = worst.max(dev);
            }
            (false, Err(Error::NotMergeable { .. })) => {}
            (true, Err(e)) => return Err(format!("{variant} failed to merge: {e}")),
            (false, Ok(_)) => return Err(format!("{variant} merged despite input-dependent routing")),
            (false, Err(e)) => return Err(format!("{variant} raised the wrong error: {e}")),
        }
    }
    Ok(format!("100 probes per mergeable variant, max deviation {worst:.2e}; routed variants refused"))
}

fn param_count_suite() -> Outcome {
    let dims = [8, 16, 64];
    let mut cases = 0;
    for &m in &dims {
        for &n in &dims {
            for heads in 1..=4 {
                for variant in Variant::ALL {
                    if variant == Variant::Vanilla && heads != 1 {
                        continue;
                    }
                    let spec = AdapterSpec::new(variant, 4, heads);
                    let state = lib(init_adapter(&spec, Tensor::zeros(&[m, n]), 0))?;
                    let counted = trainable_param_count(&spec, m, n);
                    if counted != state.trainable_entries() {
                        return Err(format!(
                            "{variant} m={m} n={n} N={heads}: formula {counted}, realized {}",
                            state.trainable_entries()
                        ));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} configurations agree exactly"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for s in run_all(Faults::default()) {
            assert!(s.passed, "{}: {}", s.name, s.detail);
        }
    }

    #[test]
    fn flipped_kl_gradient_fails_grad_check_only() {
        let results = run_all(Faults { flip_kl_gradient: true });
        let failed: Vec<_> = results.iter().filter(|s| !s.passed).map(|s| s.name).collect();
        assert_eq!(failed, vec!["grad-check"]);
        assert!(results[0].detail.contains("KL"), "{}", results[0].detail);
    }
}
