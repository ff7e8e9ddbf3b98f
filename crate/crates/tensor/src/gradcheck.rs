//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward path, so it stays independent of
//! the backward implementation it is used to verify.

use crate::{Scalar, Tensor};

/// Outcome of comparing one analytic gradient buffer against central
/// finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    /// Fraction of checked coordinates within tolerance (1.0 when nothing
    /// was checked).
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Central finite differences of `loss_fn` with respect to `input`'s
/// entries: (f(x+h) - f(x-h)) / 2h, evaluated coordinate by coordinate.
///
/// `loss_fn` must rebuild the forward pass from current tensor contents
/// (each call sees the perturbed values).
pub fn central_diff<T, F>(input: &Tensor<T>, step: f64, mut loss_fn: F) -> Vec<f64>
where
    T: Scalar,
    F: FnMut() -> f64,
{
    let original = input.to_vec();
    let h = T::from_f64(step);
    let mut fd = Vec::with_capacity(original.len());
    let mut work = original.clone();
    for i in 0..original.len() {
        work[i] = original[i] + h;
        input.set_data(&work).expect("same length");
        let plus = loss_fn();
        work[i] = original[i] - h;
        input.set_data(&work).expect("same length");
        let minus = loss_fn();
        work[i] = original[i];
        fd.push((plus - minus) / (2.0 * step));
    }
    input.set_data(&original).expect("same length");
    fd
}

/// Compare an analytic gradient against finite differences with relative
/// tolerance `rel_tol`; coordinates where both |analytic| and |fd| fall
/// below `abs_floor` are skipped (below finite-difference resolution).
pub fn compare(analytic: &[f64], fd: &[f64], rel_tol: f64, abs_floor: f64) -> GradCheck {
    let mut checked = 0;
    let mut passed = 0;
    let mut skipped = 0;
    let mut max_rel_err: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(fd) {
        if a.abs() < abs_floor && n.abs() < abs_floor {
            skipped += 1;
            continue;
        }
        checked += 1;
        let denom = a.abs().max(n.abs()).max(abs_floor);
        let rel = (a - n).abs() / denom;
        max_rel_err = max_rel_err.max(rel);
        if rel <= rel_tol {
            passed += 1;
        }
    }
    GradCheck {
        checked,
        passed,
        skipped,
        max_rel_err,
    }
}
