//! Finite-difference verification of the reverse pass.
//!
//! Analytic gradients from [`Tape::backward`] are compared against central
//! differences `(f(θ+h) - f(θ-h)) / 2h` for every parameter entry. The
//! function under test must be deterministic; stochastic primitives have to
//! run in eval mode or re-create their random stream on every call.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// Outcome of one gradient check: worst relative error per parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Name and error of the worst parameter.
    pub fn worst(&self) -> (&str, f64) {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
            .unwrap_or(("", 0.0))
    }
}

/// Relative error with the scale clamped at one:
/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

fn eval_scalar<F>(params: &[(String, Tensor)], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let vars: Vec<VarId> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Analytic gradients of `f` with respect to every parameter.
pub fn analytic_gradients<F>(params: &[(String, Tensor)], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let vars: Vec<VarId> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v).clone()).collect())
}

/// Compare the supplied gradients against central differences of `f`.
///
/// Exposed separately from [`grad_check`] so tests can feed deliberately
/// corrupted gradients and confirm the comparison catches them.
pub fn compare_to_numeric<F>(
    params: &[(String, Tensor)],
    h: f64,
    f: &F,
    analytic: &[Tensor],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    assert!(h > 0.0, "step size must be positive");
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    let mut shifted: Vec<(String, Tensor)> = params.to_vec();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for idx in 0..tensor.len() {
            let orig = tensor.values()[idx];
            shifted[pi].1.values_mut()[idx] = orig + h;
            let plus = eval_scalar(&shifted, f)?;
            shifted[pi].1.values_mut()[idx] = orig - h;
            let minus = eval_scalar(&shifted, f)?;
            shifted[pi].1.values_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi].values()[idx], numeric));
        }
        overall = overall.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
    })
}

/// Full check: determinism probe, analytic reverse pass, then central
/// differences with step `h` on every parameter entry.
pub fn grad_check<F>(params: &[(String, Tensor)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let first = eval_scalar(params, &f)?;
    let second = eval_scalar(params, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::InvalidInput(
            "grad_check requires a deterministic function; run stochastic \
             primitives in eval mode or from a re-created random stream"
                .into(),
        ));
    }
    let analytic = analytic_gradients(params, &f)?;
    compare_to_numeric(params, h, &f, &analytic)
}
