//! Central-difference gradient verification in 64-bit arithmetic.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// One-sided slopes disagreeing by more than this (relative) mark a kink.
    pub kink_tol: f64,
    /// Lower bound on the denominator of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, kink_tol: 1e-3, abs_floor: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - fd| / max(|analytic|, |fd|, abs_floor)`.
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates sitting on a non-differentiable point, left out of the maximum.
    pub excluded: Vec<(usize, usize)>,
}

/// Compares reverse-mode gradients of a scalar function with central differences.
///
/// `f` receives one leaf per entry of `inputs` and must return a one-element var.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if out.value().numel() != 1 {
        return Err(Error::shape("gradient_check", format!("function must return a scalar, got {:?}", out.shape())));
    }
    let f0 = out.value().item();
    tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|v| tape.grad_or_zeros(v)).collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                tape.constant(t)
            })
            .collect();
        Ok(f(&mut tape, &vars)?.value().item())
    };

    let h = opts.step;
    let mut report = GradCheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let plus = eval(i, k, h)?;
            let minus = eval(i, k, -h)?;
            let forward = (plus - f0) / h;
            let backward = (f0 - minus) / h;
            let fd = (plus - minus) / (2.0 * h);
            if (forward - backward).abs() > opts.kink_tol * fd.abs().max(1.0) {
                report.excluded.push((i, k));
                continue;
            }
            let a = analytic[i].data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.abs_floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, k));
            }
        }
    }
    Ok(report)
}
