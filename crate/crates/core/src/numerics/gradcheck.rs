use crate::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Compare an analytic gradient with central differences at `coords`.
///
/// Returns `max |analytic − numeric| / (|analytic| + 1e-8)` over the sampled
/// coordinates.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(format!(
            "gradient length {} != parameter length {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.len() {
            return Err(Error::shape(format!("coordinate {i} out of range")));
        }
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
