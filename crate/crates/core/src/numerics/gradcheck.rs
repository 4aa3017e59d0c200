//! Central finite-difference verification of analytic gradients.

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub failed: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

/// Compares `analytic` against central finite differences of `f` at `point`,
/// coordinate by coordinate, with step [`FD_STEP`].
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`. Failures
/// are reported, never thrown.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic.len(),
        "grad_check: point and analytic gradient must have equal length"
    );
    let mut x = point.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_index = None;
    let mut failed = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let plus = f(&x);
        x[i] = orig - FD_STEP;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = Some(i);
        }
        if !(rel < tolerance) {
            failed += 1;
        }
    }
    GradCheckReport {
        tolerance,
        max_rel_err,
        worst_index,
        checked: point.len(),
        failed,
    }
}
