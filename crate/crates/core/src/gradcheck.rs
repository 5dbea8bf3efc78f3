//! Central finite-difference utilities used by the test suites to verify
//! analytic gradients. These helpers only re-run scalar-valued closures at
//! perturbed inputs, so they stay independent of the backward pass they
//! are checking.

use crate::error::Result;

/// Default perturbation for central differences at f64 precision.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central difference df/dx_i for the listed coordinates of a flat buffer.
/// The closure receives the perturbed buffer and returns the scalar value.
pub fn central_diff<F>(x: &[f64], coords: &[usize], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let hi = f(&work)?;
        work[i] = orig - eps;
        let lo = f(&work)?;
        work[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Worst relative disagreement between analytic and numeric gradients.
///
/// Coordinates where both are below `floor` in magnitude are treated as
/// zero and skipped; central differences cannot resolve them above the
/// f64 rounding noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Resolution floor for a gradient comparison: coordinates four orders of
/// magnitude below the dominant gradient sit at or under the rounding
/// noise of a central difference and carry no signal.
pub fn grad_floor(analytic: &[f64], numeric: &[f64]) -> f64 {
    let gmax = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    (1e-4 * gmax).max(1e-6)
}

/// Evenly spread sample of `count` coordinates out of `len`, for checking
/// large tensors without evaluating every entry.
pub fn sample_coords(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}
