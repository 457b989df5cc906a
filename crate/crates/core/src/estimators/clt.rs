//! Normalized empirical distribution of a generation: CDF, window masses, KS distance.

use serde::Serialize;

use super::{EstimatorError, SortedPositions};
use crate::env_model::QuenchedMoments;
use crate::numeric::{normal_cdf, normal_pdf};
use crate::simulate::GenerationSnapshot;

/// `Z_n(-inf, b_n x + a_n] / Z_n(R)` on `x_grid`.
pub fn clt_empirical_cdf(snapshot: &GenerationSnapshot, moments: &QuenchedMoments, x_grid: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let sorted = SortedPositions::from_snapshot(snapshot)?;
    clt_cdf_sorted(&sorted, moments, snapshot.n, x_grid)
}

pub fn clt_cdf_sorted(sorted: &SortedPositions, moments: &QuenchedMoments, n: usize, x_grid: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let (a, b) = moments.normalizers(n)?;
    Ok(normalized_cdf(sorted, a, b, x_grid))
}

/// `Z_n(-inf, b x + a] / Z_n(R)` for arbitrary normalizers.
pub fn normalized_cdf(sorted: &SortedPositions, a: f64, b: f64, x_grid: &[f64]) -> Vec<f64> {
    let total = sorted.len() as f64;
    x_grid
        .iter()
        .map(|&x| {
            let y = if x.is_infinite() { x } else { b * x + a };
            sorted.count_le(y) as f64 / total
        })
        .collect()
}

/// Local-limit comparison on a grid of window starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LltGap {
    pub n: usize,
    pub h: f64,
    pub x_grid: Vec<f64>,
    /// `b_n Z_n(x, x+h) / Z_n(R)`.
    pub window_mass: Vec<f64>,
    /// `h p((x - a_n) / b_n)`.
    pub expected: Vec<f64>,
    pub gap: Vec<f64>,
    pub sup_gap: f64,
}

/// Grid `a_n + k b_n / 10`, `k = -40..=40`.
pub fn default_llt_grid(a: f64, b: f64) -> Vec<f64> {
    (-40..=40).map(|k| a + b * k as f64 / 10.0).collect()
}

pub fn llt_gap(snapshot: &GenerationSnapshot, moments: &QuenchedMoments, h: f64, x_grid: &[f64]) -> Result<LltGap, EstimatorError> {
    let sorted = SortedPositions::from_snapshot(snapshot)?;
    llt_gap_sorted(&sorted, moments, snapshot.n, h, x_grid)
}

pub fn llt_gap_sorted(sorted: &SortedPositions, moments: &QuenchedMoments, n: usize, h: f64, x_grid: &[f64]) -> Result<LltGap, EstimatorError> {
    if !moments.non_lattice {
        return Err(EstimatorError::Lattice);
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(EstimatorError::InvalidArgument(format!("window width h = {h} must be positive")));
    }
    let (a, b) = moments.normalizers(n)?;
    let total = sorted.len() as f64;
    let window_mass: Vec<f64> = x_grid
        .iter()
        .map(|&x| b * sorted.count_open(x, x + h) as f64 / total)
        .collect();
    let expected: Vec<f64> = x_grid.iter().map(|&x| h * normal_pdf((x - a) / b)).collect();
    let gap: Vec<f64> = window_mass.iter().zip(&expected).map(|(w, e)| w - e).collect();
    let sup_gap = gap.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(LltGap {
        n,
        h,
        x_grid: x_grid.to_vec(),
        window_mass,
        expected,
        gap,
        sup_gap,
    })
}

/// `max |F - G|` over a shared grid.
pub fn ks_distance(empirical: &[f64], reference: &[f64]) -> Result<f64, EstimatorError> {
    if empirical.len() != reference.len() {
        return Err(EstimatorError::GridMismatch {
            left: empirical.len(),
            right: reference.len(),
        });
    }
    Ok(empirical
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (e, r)| m.max((e - r).abs())))
}

/// `Phi` on a grid.
pub fn normal_reference(x_grid: &[f64]) -> Vec<f64> {
    x_grid.iter().map(|&x| normal_cdf(x)).collect()
}
