//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so exact-zero gradients are
/// compared absolutely.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ElementFailure {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub max_relative_error: f64,
    pub failures: Vec<ElementFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.failures.is_empty())
    }

    pub fn max_relative_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_relative_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_difference_check output", 1, tape.value(out).len()));
    }
    Ok((tape, vars, out))
}

/// Compares the analytic gradient of the scalar function `f` against
/// `(f(x+ε) − f(x−ε)) / 2ε` for every element of every input.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let (tape, vars, out) = evaluate(inputs, &f)?;
    let grads = tape.backward(out);

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].len());
        let mut report = InputReport {
            max_relative_error: 0.0,
            failures: Vec::new(),
        };
        for e in 0..inputs[i].len() {
            let original = inputs[i].data()[e];
            probe[i].data_mut()[e] = original + epsilon;
            let (tp, _, op) = evaluate(&probe, &f)?;
            let plus = tp.scalar(op);
            probe[i].data_mut()[e] = original - epsilon;
            let (tm, _, om) = evaluate(&probe, &f)?;
            let minus = tm.scalar(om);
            probe[i].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[e];
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                report.failures.push(ElementFailure {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    reason: "non-finite value",
                });
                report.max_relative_error = f64::INFINITY;
                continue;
            }
            let err = relative_error(a, numeric);
            report.max_relative_error = report.max_relative_error.max(err);
            if err > tolerance {
                report.failures.push(ElementFailure {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    reason: "relative error above tolerance",
                });
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports })
}
