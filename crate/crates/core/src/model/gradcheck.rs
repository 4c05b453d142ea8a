//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use serde::Serialize;

use crate::error::Result;
use crate::rng::keyed;

/// Bound on the cancellation error of a difference quotient, in units of
/// `eps * |f| / step`.
const ROUNDOFF_FACTOR: f64 = 16.0;

#[derive(Clone, Debug)]
pub struct GradientCheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Upper bound on replacements drawn for points sitting on a kink.
    pub max_resamples: usize,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            samples: 60,
            step: 1e-5,
            tolerance: 1e-3,
            seed: 0,
            max_resamples: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub checked: usize,
    /// Points skipped because the objective is not smooth within one step or
    /// the gradient is below the resolution of the difference quotient.
    pub resampled: usize,
    pub max_relative_error: f64,
    pub failures: Vec<GradientFailure>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `objective`'s gradient against central differences at randomly
/// chosen coordinates of `point`.
///
/// A mismatching coordinate whose forward and backward one-sided differences
/// disagree by more than the mismatch itself straddles a nonlinearity kink and
/// is replaced by another coordinate, as is one whose mismatch is within the
/// cancellation error of the difference quotient.
pub fn check_gradient<F>(
    mut point: Vec<f64>,
    mut objective: F,
    cfg: &GradientCheckConfig,
) -> Result<GradientReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (f0, grad) = objective(&point)?;
    let n = point.len();
    let mut rng = keyed(&[cfg.seed, 0x6772_6164]);
    let order = sample(&mut rng, n, n).into_vec();
    let mut report = GradientReport {
        checked: 0,
        resampled: 0,
        max_relative_error: 0.0,
        failures: Vec::new(),
    };
    for &i in &order {
        if report.checked >= cfg.samples {
            break;
        }
        let orig = point[i];
        point[i] = orig + cfg.step;
        let fp = objective(&point)?.0;
        point[i] = orig - cfg.step;
        let fm = objective(&point)?.0;
        point[i] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let rel = (grad[i] - numeric).abs() / numeric.abs().max(1e-8);
        if rel >= cfg.tolerance {
            let roundoff = ROUNDOFF_FACTOR * f64::EPSILON * f0.abs().max(fp.abs()).max(fm.abs()) / cfg.step;
            let forward = (fp - f0) / cfg.step;
            let backward = (f0 - fm) / cfg.step;
            let unresolved = (grad[i] - numeric).abs() <= roundoff
                || (forward - backward).abs() > (grad[i] - numeric).abs();
            if unresolved && report.resampled < cfg.max_resamples
            {
                report.resampled += 1;
                continue;
            }
            report.failures.push(GradientFailure {
                index: i,
                analytic: grad[i],
                numeric,
                relative_error: rel,
            });
        }
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
