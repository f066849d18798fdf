//! Central finite-difference gradient oracle.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} checked={} h={:.0e}",
            self.op, self.max_rel_error, self.checked, self.step
        )
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Difference quotient used by the oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p + h) - f(p - h)) / 2h`.
    #[default]
    Central,
    /// `(-f(p + 2h) + 8 f(p + h) - 8 f(p - h) + f(p - 2h)) / 12h`. Fourth
    /// order, so it tolerates a larger `h` and therefore less cancellation.
    FourthOrder,
}

/// Compares `analytic` against `(f(p + h e_i) - f(p - h e_i)) / 2h` on the
/// selected coordinates (all of them when `indices` is `None`).
pub fn finite_diff_check(
    op: &str,
    f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    indices: Option<&[usize]>,
) -> GradCheckReport {
    finite_diff_check_with(op, f, params, analytic, h, indices, Stencil::Central)
}

pub fn finite_diff_check_with(
    op: &str,
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    indices: Option<&[usize]>,
    stencil: Stencil,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut at = |p: &mut Vec<f64>, i: usize, v: f64| {
        let orig = p[i];
        p[i] = v;
        let y = f(p);
        p[i] = orig;
        y
    };
    let mut worst = 0.0f64;
    for &i in idx {
        let x = p[i];
        let numeric = match stencil {
            Stencil::Central => (at(&mut p, i, x + h) - at(&mut p, i, x - h)) / (2.0 * h),
            Stencil::FourthOrder => {
                let (f2, f1) = (at(&mut p, i, x + 2.0 * h), at(&mut p, i, x + h));
                let (m1, m2) = (at(&mut p, i, x - h), at(&mut p, i, x - 2.0 * h));
                (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h)
            }
        };
        let e = relative_error(analytic[i], numeric);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    GradCheckReport {
        op: op.to_string(),
        max_rel_error: worst,
        checked: idx.len(),
        step: h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let x = [0.3, -0.7, 0.55, 0.9];
        let r = finite_diff_check("half_sq", |p| 0.5 * p.iter().map(|v| v * v).sum::<f64>(), &x, &x, 1e-6, None);
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-9, "{r}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = [1.0, 2.0];
        let r = finite_diff_check("bad", |p| p[0] * p[1], &x, &[2.0, 2.0], 1e-6, None);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn fourth_order_is_exact_on_quartics() {
        let x = [0.7, -1.3];
        let f = |p: &[f64]| p[0].powi(4) + p[0] * p[1].powi(3);
        let g = [4.0 * 0.7f64.powi(3) + (-1.3f64).powi(3), 3.0 * 0.7 * 1.3f64.powi(2)];
        let r = finite_diff_check_with("quartic", f, &x, &g, 1e-2, None, Stencil::FourthOrder);
        assert!(r.max_rel_error < 1e-12, "{r}");
    }
}
