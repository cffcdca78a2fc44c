//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Default perturbation for the working precision.
#[cfg(not(feature = "f64"))]
pub const DEFAULT_STEP: Scalar = 1e-3;
#[cfg(feature = "f64")]
pub const DEFAULT_STEP: Scalar = 1e-6;

/// Pass threshold on [`GradCheckReport::max_rel_error`] for the working precision.
#[cfg(not(feature = "f64"))]
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
#[cfg(feature = "f64")]
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)` seen.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare tape gradients of the scalar `f(inputs)` against central
/// differences, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: Scalar, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_gradients_at(inputs, &all, step, f)
}

/// As [`check_gradients`], perturbing only `indices[i]` of input `i`.
pub fn check_gradients_at<F>(inputs: &[Tensor], indices: &[Vec<usize>], step: Scalar, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    check_piecewise_at(inputs, indices, step, |tape, vars| Ok((f(tape, vars)?, 0)))
}

/// Check for a piecewise-smooth `f` that also returns a key naming the
/// smooth region it evaluated in (for example a hash of top-k supports).
/// A coordinate whose `±step` evaluations land in a different region than
/// the unperturbed point straddles a kink; it is skipped and counted.
pub fn check_piecewise_at<F>(inputs: &[Tensor], indices: &[Vec<usize>], step: Scalar, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<(Var, u64)>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let (out, key) = f(&mut tape, &vars)?;
        Ok((tape.value(out).item() as f64, key))
    };

    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let (out, region) = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].len());
        for &j in indices.get(i).map_or(&[][..], |v| v.as_slice()) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, kp) = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, km) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if kp != region || km != region {
                report.skipped += 1;
                continue;
            }
            // the actual perturbation after rounding, not the nominal step
            let h = ((orig + step) - (orig - step)) as f64;
            let numeric = (plus - minus) / h;
            let a = analytic[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduce any tensor to a scalar with fixed pseudo-random weights, so the
/// check exercises a non-uniform upstream gradient.
pub fn weighted_sum(tape: &mut GradTape, x: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let w: Vec<Scalar> = (0..n)
        .map(|i| ((i as f64 * 0.618_033_988_75 + 0.1).fract() * 2.0 - 1.0) as Scalar)
        .collect();
    let w = tape.constant(Tensor::new(tape.shape(x), w)?);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}
