//! Central-difference validation of reverse-mode gradients (64-bit only).

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose `±h` perturbation crosses a `relu`/`abs` kink.
    pub skipped: usize,
    pub flagged: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Finite-difference formula used as the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h²)`.
    Central3,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, error `O(h⁴)`.
    Central5,
}

impl Stencil {
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central3 => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::Central5 => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
        }
    }
}

/// Compare `d f / d inputs` from the tape against central differences with
/// step `h`. Entries where the perturbed program takes a different branch of
/// a piecewise op are excluded rather than compared.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, h, tol, Stencil::Central3)
}

/// [`grad_check`] with an explicit stencil; deep graphs with strong
/// curvature need [`Stencil::Central5`] to resolve `1e-5` relative error.
pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let analytic = g.gradients(loss, &vars)?;
    let base_sig = g.kink_signature();
    drop(g);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.kink_signature()))
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let (mut numeric, mut crosses) = (0.0, false);
            for &(step, weight) in stencil.taps() {
                work[i].data_mut()[j] = x0 + step * h;
                let (fv, sig) = eval(&work)?;
                crosses |= sig != base_sig;
                numeric += weight * fv;
            }
            work[i].data_mut()[j] = x0;
            if crosses {
                report.skipped += 1;
                continue;
            }
            let numeric = numeric / h;
            let a = analytic[i].data()[j];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol || !rel.is_finite() {
                report.flagged.push(GradMismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
