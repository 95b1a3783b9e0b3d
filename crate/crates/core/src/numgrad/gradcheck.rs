//! Central-difference verification of taped gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumError;

/// Default probe width; large enough to escape cancellation at f64
/// precision, small enough that curvature stays negligible.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a gradient check: the worst relative error over every
/// coordinate of every parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    /// Number of coordinates probed.
    pub checks: usize,
}

/// Compares taped gradients of a scalar-valued builder against central
/// finite differences, coordinate by coordinate.
///
/// `build` must construct the loss from the given parameter leaves alone
/// (it is re-run for every probe, so any randomness must be baked into
/// captured constants beforehand). `eps` outside `[1e-7, 1e-3]` is
/// rejected — smaller drowns in round-off, larger in curvature.
pub fn grad_check<F>(params: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumError::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    if params.is_empty() {
        return Err(NumError::Invalid("grad_check needs at least one parameter".into()));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        let (r, c) = tape.value(loss).shape();
        return Err(NumError::NonScalarOutput { rows: r, cols: c });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("parameter leaf gradient is always populated"))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(NumError::NonFinite { op: "grad_check probe" });
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), checks: 0 };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let f_plus = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - eps;
            let f_minus = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.checks += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}
