//! Central finite-difference oracle for gradient verification.

use crate::array::Array;

/// |a - n| / max(|a|, |n|, floor): symmetric relative error with a floor so
/// near-zero gradient pairs compare on absolute terms.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference (f(x+h e_i) - f(x-h e_i)) / 2h for each coordinate in
/// `coords`. `f` must be a deterministic pure function of its input.
pub fn finite_diff(
    f: &mut dyn FnMut(&Array<f64>) -> f64,
    at: &Array<f64>,
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut plus = at.data().to_vec();
            plus[i] += h;
            let mut minus = at.data().to_vec();
            minus[i] -= h;
            let fp = f(&Array::from_vec(at.shape().to_vec(), plus).expect("fd shape"));
            let fm = f(&Array::from_vec(at.shape().to_vec(), minus).expect("fd shape"));
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Compare an analytic gradient against the finite-difference oracle on the
/// given coordinates; returns the worst relative error.
pub fn max_rel_err(
    f: &mut dyn FnMut(&Array<f64>) -> f64,
    at: &Array<f64>,
    analytic: &Array<f64>,
    h: f64,
    coords: &[usize],
) -> f64 {
    let numeric = finite_diff(f, at, h, coords);
    coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| rel_err(analytic.data()[i], n, 1e-3))
        .fold(0.0, f64::max)
}

/// Evenly spaced coordinate sample (at most `max` coords, always nonempty).
pub fn sample_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let step = len / max;
        (0..max).map(|i| i * step).collect()
    }
}
