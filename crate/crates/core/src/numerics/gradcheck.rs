//! Central-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check over one or more inputs.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Max over every checked coordinate of
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// The same maximum, per input tensor.
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

/// Checks the tape gradient of a scalar function of one tensor against
/// central differences with the given step.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(
        |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
    )?;
    Ok(report.max_rel_err)
}

/// Multi-input form of [`finite_diff_check`]; every input is perturbed one
/// coordinate at a time.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), want_grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::Numeric(format!("checked function must be scalar, got {:?}", value.shape())));
        }
        let value = value.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("function value is not finite: {value}")));
        }
        let grads = if want_grad {
            tape.backward(out)?;
            vars.iter().map(|v| tape.grad(*v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    for (k, input) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            coordinates += 1;
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck { max_rel_err, per_input, coordinates })
}
