//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check: the worst entry found.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` at which the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn eval<F>(params: &[Tensor], f: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn value_at<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = eval(params, f)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    Ok(v)
}

/// Gradient of the scalar program `f` with respect to every parameter tensor.
pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval(params, f)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// The relative error of an entry is
/// `|a − c| / max(|a|, |c|, 1e−12)`; the maximum over all entries is reported.
pub fn compare_with_central_differences<F>(
    params: &[Tensor],
    eps: f64,
    f: &F,
    analytic: &[Vec<f64>],
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.numel() {
            let orig = param.data()[k];
            probe[pi].data_mut()[k] = orig + eps;
            let plus = value_at(&probe, f)?;
            probe[pi].data_mut()[k] = orig - eps;
            let minus = value_at(&probe, f)?;
            probe[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between tape gradients and central differences.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    compare_with_central_differences(params, eps, &f, &analytic)
}
