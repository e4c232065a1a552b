//! Central finite-difference check of the analytic gradients.

use super::{backward, forward_loss, Batch, ModelError, Parameters, PARAM_NAMES};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared on an absolute scale instead.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub array: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares every analytic gradient coordinate against
/// `(L(θ + h) - L(θ - h)) / 2h`.
///
/// `corrupt` adds a delta to one analytic coordinate `(array, index, delta)`
/// before comparison; it exists to prove the check can fail.
pub fn gradient_check(
    params: &Parameters<f64>,
    batch: &Batch,
    step: f64,
    corrupt: Option<(usize, usize, f64)>,
) -> Result<GradCheckReport, ModelError> {
    let (_, cache) = forward_loss(params, batch)?;
    let mut analytic = backward(params, &cache)?;
    if let Some((array, index, delta)) = corrupt {
        let target = analytic
            .arrays_mut()
            .into_iter()
            .nth(array)
            .and_then(|a| a.data.get_mut(index))
            .ok_or_else(|| ModelError::Shape(format!("no coordinate ({array}, {index})")))?;
        *target += delta;
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (a, name) in PARAM_NAMES.iter().enumerate() {
        let len = analytic.arrays()[a].data.len();
        for i in 0..len {
            let original = probe.arrays()[a].data[i];
            probe.arrays_mut()[a].data[i] = original + step;
            let (plus, _) = forward_loss(&probe, batch)?;
            probe.arrays_mut()[a].data[i] = original - step;
            let (minus, _) = forward_loss(&probe, batch)?;
            probe.arrays_mut()[a].data[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let an = analytic.arrays()[a].data[i];
            let err = relative_error(an, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some(Coordinate {
                    array: name,
                    index: i,
                    analytic: an,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
