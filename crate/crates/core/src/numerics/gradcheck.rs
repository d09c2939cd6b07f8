//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, flat component)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Components whose probe pair changed a branch decision and therefore
    /// straddled a non-differentiable point.
    pub skipped_at_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of scalar `f` against central differences at
/// every component of every input.
///
/// `f` receives a fresh graph (with branch tracking) and one differentiable
/// leaf per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::with_branch_tracking();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::domain("grad_check", "non-finite function value"));
        }
        Ok((v, g.branch_signature()))
    };

    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(
        g.value(out).numel() == 1,
        "grad_check",
        "function must be scalar-valued"
    );
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped_at_kinks: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut shifted = input.to_vec();
            let x0 = shifted[j];
            shifted[j] = x0 + FD_STEP;
            probe[i] = Tensor::new(input.shape(), shifted.clone())?;
            let (plus, sig_plus) = eval(&probe)?;
            shifted[j] = x0 - FD_STEP;
            probe[i] = Tensor::new(input.shape(), shifted)?;
            let (minus, sig_minus) = eval(&probe)?;
            probe[i] = input.clone();
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i].data()[j], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
