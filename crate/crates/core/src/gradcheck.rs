//! Central finite-difference gradient checking at `f64`.
//!
//! The numeric side only evaluates forward values; it shares no backward
//! code with the tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default perturbation step.
pub const STEP: f64 = 1e-5;

/// Relative errors are measured as `|a - n| / max(|a|, |n|, FLOOR)`, so
/// gradients far below `FLOOR` are compared absolutely.
pub const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compare tape gradients of the scalar `f(inputs)` with central differences
/// for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_with_step(inputs, STEP, f)
}

pub fn check_with_step<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Invalid("gradient check needs a scalar function".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (k, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// `sum(out * probe)`: projects a tensor-valued output onto a fixed random
/// direction so a vector Jacobian is checked through one scalar.
pub fn project(tape: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}
