//! Central finite-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Magnitude floor below which gradients count as zero when comparing.
pub const REL_FLOOR: f64 = 1e-7;

/// Checks `∂f/∂inputs` for a scalar function built on a fresh tape.
///
/// `select(input_index, len)` chooses which elements of each input to probe;
/// pass `|_, n| (0..n).collect()` to probe everything.
pub fn check_gradients<F, S>(inputs: &[Tensor], eps: f64, f: F, select: S) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in select(i, input.len()) {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let up = eval(&probe);
            probe[i].data_mut()[e] = orig - eps;
            let down = eval(&probe);
            probe[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let rel = relative_error(a, numeric, REL_FLOOR);
            report.checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Probes every element.
pub fn all_elements(_input: usize, len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// Probes at most `max` evenly spaced elements of each input.
pub fn spread(max: usize) -> impl Fn(usize, usize) -> Vec<usize> {
    move |_, len| {
        if len <= max {
            (0..len).collect()
        } else {
            (0..max).map(|k| k * len / max + (k * 7) % (len / max).max(1)).collect()
        }
    }
}
