//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of the scalar `f` against
/// `(f(x+h) - f(x-h)) / 2h` on every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, h, tol, usize::MAX)
}

/// As [`grad_check`] but visits at most `per_input` evenly spaced
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::param("h", "must lie in (0, 1e-2]"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if let Some(op) = g.first_non_finite() {
        return Err(Error::NonFinite(op));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; g.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if let Some(op) = g.first_non_finite() {
            return Err(Error::NonFinite(op));
        }
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        tol,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = if per_input >= n { 1 } else { n.div_ceil(per_input) };
        for c in (0..n).step_by(step) {
            let x0 = input.data[c];
            work[ii].data[c] = x0 + h;
            let fp = eval(&work)?;
            work[ii].data[c] = x0 - h;
            let fm = eval(&work)?;
            work[ii].data[c] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii][c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ii, c));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
