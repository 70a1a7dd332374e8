//! Central-difference verification of reverse-mode gradients.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`; the
//! harness reports the worst coordinate over all inputs.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const REL_ERR_FLOOR: f64 = 1e-8;

/// A scalar loss that can be built at any precision. Lets the same function
/// be differentiated in 32-bit and probed numerically in 64-bit.
pub trait ScalarFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `dLoss/dx` for a single input tensor; returns the worst relative error.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let report = check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_err)
}

/// Checks every coordinate of every input, analytic and numeric in the same precision.
pub fn check_gradients<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    validate_step(step)?;
    let analytic = analytic_gradients(&f, inputs)?;
    let eval = |xs: &[Tensor<T>]| evaluate(&f, xs);
    let numeric = numeric_gradients(eval, inputs, step)?;
    Ok(compare(&analytic, &numeric))
}

/// Analytic gradients in `f32` against central differences evaluated in
/// `f64` at the same (widened) point.
pub fn check_gradients_mixed<F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f32>],
    step: f64,
) -> Result<GradCheckReport> {
    validate_step(step)?;
    let analytic = analytic_gradients(&|g: &mut Graph<f32>, v: &[Var]| f.build(g, v), inputs)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let eval = |xs: &[Tensor<f64>]| evaluate(&|g: &mut Graph<f64>, v: &[Var]| f.build(g, v), xs);
    let numeric = numeric_gradients(eval, &wide, step)?;
    Ok(compare(&analytic, &numeric))
}

/// Same-precision check for a [`ScalarFn`].
pub fn check_scalar_fn<T: Real, F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<T>],
    step: f64,
) -> Result<GradCheckReport> {
    check_gradients(|g: &mut Graph<T>, v: &[Var]| f.build(g, v), inputs, step)
}

fn validate_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")))
    }
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0].as_f64())
}

fn analytic_gradients<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| grads.wrt(v).data().iter().map(|x| x.as_f64()).collect())
        .collect())
}

fn numeric_gradients<T, E>(eval: E, inputs: &[Tensor<T>], step: f64) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    E: Fn(&[Tensor<T>]) -> Result<f64>,
{
    let base_a = eval(inputs)?;
    let base_b = eval(inputs)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base_a} then {base_b}"
        )));
    }
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for c in 0..inputs[i].len() {
            let x0 = inputs[i].data()[c];
            // the effective step is what the scalar type can actually represent
            let plus = x0 + T::of(step);
            let minus = x0 - T::of(step);
            work[i].data_mut()[c] = plus;
            let fp = eval(&work)?;
            work[i].data_mut()[c] = minus;
            let fm = eval(&work)?;
            work[i].data_mut()[c] = x0;
            gi.push((fp - fm) / (plus.as_f64() - minus.as_f64()));
        }
        out.push(gi);
    }
    Ok(out)
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (c, (&av, &nv)) in a.iter().zip(n).enumerate() {
            report.coordinates += 1;
            let e = relative_error(av, nv);
            if e > report.max_rel_err || report.coordinates == 1 {
                report.max_rel_err = e;
                report.worst = (i, c);
                report.analytic_at_worst = av;
                report.numeric_at_worst = nv;
            }
        }
    }
    report
}
