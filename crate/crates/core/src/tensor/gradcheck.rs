//! Central-difference gradient checker.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over elements of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) where the maximum occurred.
    pub worst: (usize, usize),
    /// Elements compared.
    pub elements: usize,
    /// Elements left out because `x + h` or `x - h` takes a different branch
    /// of a ReLU or max-pool than `x` does, so the central difference spans a
    /// kink.
    pub skipped: usize,
}

/// Checks `d f / d x` for a scalar-valued `f`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Checks the gradient of `f` with respect to every element of every input
/// whose perturbation stays on the same smooth piece.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((scalar_of(&tape, out)?, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let branches = tape.branch_signature();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        elements: 0,
        skipped: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input is a requires-grad leaf");
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let (plus, above) = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let (minus, below) = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            if above != branches || below != branches {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
            report.elements += 1;
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::shape(
            "grad_check",
            format!("function must return a scalar, got {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}
