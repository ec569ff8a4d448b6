//! Central finite-difference checking of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero in both routes do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape's gradient of the scalar produced by `build` against
/// central differences, perturbing every element of every input.
///
/// `build` receives a fresh tape with `inputs` recorded as parameters and
/// must be deterministic.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    build: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every parameter has a gradient");
        for ei in 0..inputs[ti].len() {
            let original = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = original + cfg.step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ei] = original - cfg.step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ei] = original;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (ti, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
