//! Central-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::numerics::rng::rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Lower bound on the relative-error denominator.
pub const DENOMINATOR_CLAMP: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements of each input.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, max_elements_per_input: None, seed: 0 }
    }
}

/// Outcome of a gradient check; `max_rel_error` is the worst element.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_CLAMP)
}

/// Compares the tape gradient of the scalar `f` at `inputs` against
/// `(f(x+h) - f(x-h)) / 2h` element by element.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], options: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value_ref().numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "grad_check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars)?.item().as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let h = options.step;
    let mut picker = rng(options.seed);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (which, grad) in analytic.iter().enumerate() {
        let numel = grad.numel();
        let indices: Vec<usize> = match options.max_elements_per_input {
            Some(cap) if cap < numel => sample(&mut picker, numel, cap).into_vec(),
            _ => (0..numel).collect(),
        };
        for idx in indices {
            let original = work[which].data()[idx];
            work[which].data_mut()[idx] = original + T::c(h);
            let plus = eval(&work);
            work[which].data_mut()[idx] = original - T::c(h);
            let minus = eval(&work);
            work[which].data_mut()[idx] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = grad.data()[idx].as_f64();
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
