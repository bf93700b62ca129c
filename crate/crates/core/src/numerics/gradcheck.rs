//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Central-difference formula.
///
/// The two-point rule has truncation error of order h^2; under a sharp
/// softmax (temperature 0.1) that alone reaches ~1e-3 relative at h = 1e-3,
/// so the checks default to the four-point rule (error of order h^4) at the
/// same step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// (f(x+h) - f(x-h)) / 2h
    TwoPoint,
    /// (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h
    FourPoint,
}

/// Denominator floor of the relative error, so coordinates whose true
/// derivative is zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Flat coordinate (across all inputs) with the largest error.
    pub worst: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::InvalidShape {
            op: "grad_check",
            shape: v.shape().to_vec(),
            reason: "function must return a scalar".into(),
        });
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check function output".into()));
    }
    Ok(y)
}

/// Compares the tape gradient of a scalar function of several inputs
/// against four-point central differences with step `h`, coordinate by
/// coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, h, Stencil::FourPoint)
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check function output".into()));
    }
    tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend(g.data().iter().copied()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut at = |offset: f64| {
                work[i].data_mut()[j] = orig + offset;
                evaluate(&f, &work)
            };
            let d = match stencil {
                Stencil::TwoPoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FourPoint => {
                    (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
                }
            };
            work[i].data_mut()[j] = orig;
            numeric.push(d);
        }
    }

    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst,
    })
}

/// Single-input convenience wrapper.
pub fn grad_check_single<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    grad_check(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}
