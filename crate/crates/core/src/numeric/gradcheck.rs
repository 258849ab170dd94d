//! Central finite-difference verification of analytic gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Skip coordinates whose current value has magnitude below this bound
    /// (kinks of piecewise-linear inputs sit at 0).
    pub skip_near_zero: Option<f64>,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_elements: Option<usize>,
    /// Skip coordinates whose one-sided differences disagree by more than this
    /// relative amount: a kink (ReLU, max, top-k switch) lies within `h`.
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            skip_near_zero: None,
            max_elements: None,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>8}  {:>8}  {:>6}",
            "parameter", "max_rel_err", "checked", "skipped", "status"
        )?;
        for p in &self.params {
            let status = if p.max_rel_error < self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>8}  {:>8}  {:>6}",
                p.name, p.max_rel_error, p.checked, p.skipped, status
            )?;
        }
        Ok(())
    }
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares each parameter's stored analytic gradient against
/// `(f(x + h) - f(x - h)) / 2h`. `params[i].grad` must be populated;
/// parameter values are restored before returning.
pub fn finite_diff_check<F>(
    names: &[String],
    params: &mut [Tensor],
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if opts.h <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite_diff_check: h = {} must be positive", opts.h)));
    }
    if names.len() != params.len() {
        return Err(Error::InvalidArgument("finite_diff_check: one name per parameter".into()));
    }
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(names)
        .map(|(p, n)| {
            p.grad
                .clone()
                .ok_or_else(|| Error::State(format!("finite_diff_check: `{n}` has no analytic gradient")))
        })
        .collect::<Result<_>>()?;

    let center = match opts.kink_tol {
        Some(_) => Some(f(params)?),
        None => None,
    };
    let mut reports = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let numel = params[pi].numel();
        let indices: Vec<usize> = match opts.max_elements {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        let mut report = ParamReport {
            name: names[pi].clone(),
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            skipped: 0,
        };
        for idx in indices {
            let orig = params[pi].data()[idx];
            if opts.skip_near_zero.is_some_and(|g| orig.abs() < g) {
                report.skipped += 1;
                continue;
            }
            params[pi].data_mut()[idx] = orig + opts.h;
            let plus = f(params);
            params[pi].data_mut()[idx] = orig - opts.h;
            let minus = f(params);
            params[pi].data_mut()[idx] = orig;
            let (plus, minus) = (plus?, minus?);
            if let (Some(tol), Some(c)) = (opts.kink_tol, center) {
                if relative_error((plus - c) / opts.h, (c - minus) / opts.h) > tol {
                    report.skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(numeric, analytic[pi][idx]);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_index = Some(idx);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        params: reports,
    })
}
