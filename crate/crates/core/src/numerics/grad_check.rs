use super::Tensor;
use crate::error::{Error, Result};

/// Settings for a central finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor, as a multiple of `max(1, |f|)`. Entries whose
    /// gradients fall below it are compared on an absolute scale, where
    /// finite-difference round-off would otherwise dominate.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compare the analytic gradient returned by `f` at `params` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, one coordinate at a time.
///
/// `f` returns the scalar value and its gradient with respect to its argument.
pub fn grad_check<F>(mut f: F, params: &Tensor, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    check_indices(&mut f, params, cfg, 0..params.len())
}

/// As [`grad_check`], restricted to the flat indices yielded by `indices`.
pub fn check_indices<F, I>(
    f: &mut F,
    params: &Tensor,
    cfg: GradCheck,
    indices: I,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
    I: IntoIterator<Item = usize>,
{
    if cfg.eps <= 0.0 {
        return Err(Error::param("grad_check eps must be positive"));
    }
    let (f0, analytic) = f(params)?;
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f(params) = {f0}")));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::dim(format!(
            "analytic gradient shape {:?} differs from parameter shape {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let floor = cfg.floor * f0.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        passed: true,
    };
    let mut probe = params.clone();
    for i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.eps;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - cfg.eps;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value while perturbing index {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let a = analytic.data()[i];
        let abs_err = (a - numeric).abs();
        let rel = abs_err / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs_err);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}
