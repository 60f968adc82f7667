use serde::Serialize;

use super::{NumericsError, Result, Tensor};

/// Outcome for one coordinate of a central-difference check.
#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// One-sided differences disagree and do not converge as the step
    /// halves: the function has a kink here.
    pub kink: bool,
    pub finite: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coords: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// First coordinate whose evaluation produced a non-finite value.
    pub non_finite_at: Option<usize>,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.coords
            .iter()
            .filter(move |c| !c.finite || c.kink || c.rel_error >= self.tolerance)
    }
}

/// Compares `analytic` against central differences of `f` at `point` on
/// every coordinate.
///
/// Relative error is `|analytic - numeric| / (|numeric| + 1e-8)`; the check
/// passes iff every coordinate is finite, kink-free and below `tol`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, analytic: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    let all: Vec<usize> = (0..point.len()).collect();
    check_coordinates(f, point, analytic, &all, h, tol)
}

/// Same as [`finite_difference_check`] restricted to `coords`.
pub fn check_coordinates<F>(
    mut f: F,
    point: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("step must be positive, got {h}"),
        });
    }
    if analytic.len() != point.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "finite_difference_check",
            lhs: point.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let f0 = f(point);
    let mut results = Vec::with_capacity(coords.len());
    let mut non_finite_at = (!f0.is_finite()).then(|| coords.first().copied().unwrap_or(0));
    let eval = |i: usize, delta: f64, f: &mut F| {
        let mut p = point.clone();
        p.data_mut()[i] += delta;
        f(&p)
    };
    for &i in coords {
        let plus = eval(i, h, &mut f);
        let minus = eval(i, -h, &mut f);
        let finite = plus.is_finite() && minus.is_finite() && f0.is_finite();
        if !finite && non_finite_at.is_none() {
            non_finite_at = Some(i);
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel_error = (a - numeric).abs() / (numeric.abs() + 1e-8);

        // Kink probe: at a smooth point the one-sided gap shrinks linearly
        // with h and central differences at h and h/2 agree.
        let gap = (plus - f0) / h - (f0 - minus) / h;
        let noise = 64.0 * f64::EPSILON * (f0.abs() + 1.0) / h;
        let kink = finite && gap.abs() > noise.max(1e-6 * (numeric.abs() + 1.0)) && {
            let half_plus = eval(i, 0.5 * h, &mut f);
            let half_minus = eval(i, -0.5 * h, &mut f);
            let half_gap = (half_plus - f0) / (0.5 * h) - (f0 - half_minus) / (0.5 * h);
            let half_numeric = (half_plus - half_minus) / h;
            half_gap.abs() > 0.75 * gap.abs()
                || (half_numeric - numeric).abs() > (0.25 * tol * numeric.abs()).max(2.0 * noise)
        };
        results.push(CoordinateCheck {
            index: i,
            analytic: a,
            numeric,
            rel_error,
            kink,
            finite,
        });
    }
    let max_rel_error = results
        .iter()
        .map(|c| if c.finite { c.rel_error } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let passed = non_finite_at.is_none() && results.iter().all(|c| c.finite && !c.kink && c.rel_error < tol);
    Ok(GradCheckReport {
        coords: results,
        max_rel_error,
        tolerance: tol,
        passed,
        non_finite_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(|p| p.item() * p.item(), &x, &Tensor::scalar(2.0), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn abs_at_zero_is_flagged() {
        let x = Tensor::scalar(0.0);
        let r = finite_difference_check(|p| p.item().abs(), &x, &Tensor::scalar(0.0), 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert!(r.coords[0].kink);
    }

    #[test]
    fn offset_kink_is_flagged() {
        // Kink at 0.7h: one-sided gaps alone would look smooth at h/2.
        let x = Tensor::scalar(0.0);
        let r = finite_difference_check(|p| (p.item() - 0.7e-5).max(0.0), &x, &Tensor::scalar(0.0), 1e-5, 1e-4).unwrap();
        assert!(r.coords[0].kink);
    }

    #[test]
    fn smooth_curvature_is_not_a_kink() {
        let x = Tensor::vector(vec![0.3, 2.0]);
        let f = |p: &Tensor| (50.0 * p.data()[0]).sin() + p.data()[1].exp();
        let g = Tensor::vector(vec![50.0 * (15.0f64).cos(), 2.0f64.exp()]);
        let r = finite_difference_check(f, &x, &g, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::vector(vec![0.3, -1.2]);
        let r = finite_difference_check(|p| p.data()[0].sin() + p.data()[1].powi(3), &x, &Tensor::vector(vec![0.3f64.cos(), 1.0]), 1e-5, 1e-4)
            .unwrap();
        assert!(!r.passed);
        assert_eq!(r.failures().map(|c| c.index).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::vector(vec![1.0, 5e-6]);
        let r = finite_difference_check(|p| p.data()[0] + p.data()[1].ln(), &x, &Tensor::vector(vec![1.0, 1.0]), 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.non_finite_at, Some(1));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|p| p.item(), &x, &x, 0.0, 1e-4).is_err());
    }
}
