//! Fejér-kernel smoothing of the normalized counting measure.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::EstimatorError;
use crate::numeric::CompensatedSum;
use crate::simulate::GenerationSnapshot;

const MIN_PAD: f64 = 256.0;

/// `K(x) = (1/2pi) (sin(x/2) / (x/2))^2`.
pub fn fejer_kernel(x: f64) -> f64 {
    let u = 0.5 * x;
    let sinc = if u.abs() < 1e-4 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    };
    sinc * sinc / (2.0 * PI)
}

/// `K_a(x) = K(x / a) / a`.
pub fn fejer_kernel_scaled(x: f64, a: f64) -> f64 {
    fejer_kernel(x / a) / a
}

/// `(1/P_n) sum_u K_a(x - S_u)` on `x_grid`.
pub fn fejer_smooth_positions(positions: &[f64], log_p: f64, a: f64, x_grid: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(EstimatorError::InvalidArgument(format!("bandwidth a = {a} must be positive")));
    }
    let inv_p = (-log_p).exp();
    Ok(x_grid
        .par_iter()
        .map(|&x| {
            let s: CompensatedSum = positions.iter().map(|&p| fejer_kernel_scaled(x - p, a)).collect();
            s.value() * inv_p
        })
        .collect())
}

pub fn fejer_smooth(snapshot: &GenerationSnapshot, a: f64, x_grid: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let positions = snapshot
        .positions
        .as_deref()
        .ok_or(EstimatorError::MissingPositions { n: snapshot.n })?;
    fejer_smooth_positions(positions, snapshot.log_p, a, x_grid)
}

/// Grid of step `a / 10` covering `[L_n - pad, R_n + pad]` with
/// `pad = max(|L_n| + |R_n| + 20a, 256a)`.
///
/// The kernel mass beyond distance `D` is at most `4a / (pi D)`, so the floor
/// of `256a` keeps the truncated mass under 0.5% even for a tree that sits at
/// one point.
pub fn smoothing_grid(snapshot: &GenerationSnapshot, a: f64) -> Vec<f64> {
    smoothing_grid_between(snapshot.l_n, snapshot.r_n, a)
}

/// [`smoothing_grid`] for a generation with extremes `l_n` and `r_n`.
pub fn smoothing_grid_between(l_n: f64, r_n: f64, a: f64) -> Vec<f64> {
    let pad = (r_n.abs() + l_n.abs() + 20.0 * a).max(MIN_PAD * a);
    crate::numeric::linspace_step(l_n - pad, r_n + pad, a / 10.0)
}

/// Trapezoid rule on a grid.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .collect::<CompensatedSum>()
        .value()
}
