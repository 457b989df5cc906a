//! Free energy, large-deviation counts and exact mean-measure tails.

use serde::Serialize;

use super::{EstimatorError, SortedPositions};
use crate::env_model::{DisplacementLaw, EnvRealization, EnvState, EnvironmentModel};
use crate::numeric::{log_add_exp, log_normal_upper_tail, log_sum_exp, normal_cdf};
use crate::simulate::GenerationSnapshot;

/// Longest path for which lattice displacements are convolved exactly.
pub const MAX_DISCRETE_CONVOLUTION: usize = 30;

/// `(1/n) log Z~_n(t)` for every generation `n >= 1` and every `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeEnergyCurve {
    pub t_grid: Vec<f64>,
    pub n: Vec<usize>,
    /// Indexed `[row][k]`, rows aligned with `n`.
    pub values: Vec<Vec<f64>>,
}

pub fn free_energy_curve(snapshots: &[GenerationSnapshot], t_grid: &[f64]) -> Result<FreeEnergyCurve, EstimatorError> {
    let mut n = Vec::new();
    let mut values = Vec::new();
    for s in snapshots.iter().filter(|s| s.n > 0) {
        let row = t_grid
            .iter()
            .map(|&t| {
                s.log_partition_at(t)
                    .map(|lz| lz / s.n as f64)
                    .ok_or(EstimatorError::MissingPositions { n: s.n })
            })
            .collect::<Result<Vec<_>, _>>()?;
        n.push(s.n);
        values.push(row);
    }
    Ok(FreeEnergyCurve {
        t_grid: t_grid.to_vec(),
        n,
        values,
    })
}

/// `(1/n) log Z_n[nx, inf)` and `(1/n) log Z_n(-inf, nx]` on an x grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LdpRates {
    pub n: usize,
    pub x_grid: Vec<f64>,
    pub upper_counts: Vec<u64>,
    pub lower_counts: Vec<u64>,
    #[serde(with = "crate::io::extended::vec")]
    pub upper: Vec<f64>,
    #[serde(with = "crate::io::extended::vec")]
    pub lower: Vec<f64>,
}

pub fn ldp_interval_rates(snapshot: &GenerationSnapshot, x_grid: &[f64]) -> Result<LdpRates, EstimatorError> {
    let sorted = SortedPositions::from_snapshot(snapshot)?;
    Ok(ldp_rates_sorted(&sorted, snapshot.n, x_grid))
}

pub fn ldp_rates_sorted(sorted: &SortedPositions, n: usize, x_grid: &[f64]) -> LdpRates {
    let nf = n as f64;
    let upper_counts: Vec<u64> = x_grid.iter().map(|&x| sorted.count_ge(nf * x)).collect();
    let lower_counts: Vec<u64> = x_grid.iter().map(|&x| sorted.count_le(nf * x)).collect();
    let rate = |c: &u64| (*c as f64).ln() / nf;
    LdpRates {
        n,
        x_grid: x_grid.to_vec(),
        upper: upper_counts.iter().map(rate).collect(),
        lower: lower_counts.iter().map(rate).collect(),
        upper_counts,
        lower_counts,
    }
}

/// Law of the summed displacement along a path of states: a finite mixture of
/// Gaussians that share one variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PathLaw {
    /// `(value, log probability)` of the lattice part.
    atoms: Vec<(f64, f64)>,
    gauss_mean: f64,
    gauss_var: f64,
}

impl PathLaw {
    pub fn along<'a>(states: impl IntoIterator<Item = &'a EnvState>) -> Result<Self, EstimatorError> {
        let mut law = PathLaw {
            atoms: vec![(0.0, 0.0)],
            gauss_mean: 0.0,
            gauss_var: 0.0,
        };
        let mut lattice_steps = 0usize;
        for state in states {
            match state.displacement {
                DisplacementLaw::PointMass { at } => law.gauss_mean += at,
                DisplacementLaw::Gaussian { mean, variance } => {
                    law.gauss_mean += mean;
                    law.gauss_var += variance;
                }
                DisplacementLaw::TwoPoint { d, p } => {
                    lattice_steps += 1;
                    if lattice_steps > MAX_DISCRETE_CONVOLUTION {
                        return Err(EstimatorError::Unsupported(format!(
                            "exact convolution of more than {MAX_DISCRETE_CONVOLUTION} two-point steps"
                        )));
                    }
                    law.convolve_two_point(d, p);
                }
            }
        }
        Ok(law)
    }

    /// Same law for a path visiting state `j` exactly `counts[j]` times.
    pub fn from_counts(states: &[EnvState], counts: &[usize]) -> Result<Self, EstimatorError> {
        let mut law = PathLaw {
            atoms: vec![(0.0, 0.0)],
            gauss_mean: 0.0,
            gauss_var: 0.0,
        };
        for (s, &k) in states.iter().zip(counts) {
            let k = k as f64;
            match s.displacement {
                DisplacementLaw::PointMass { at } => law.gauss_mean += k * at,
                DisplacementLaw::Gaussian { mean, variance } => {
                    law.gauss_mean += k * mean;
                    law.gauss_var += k * variance;
                }
                DisplacementLaw::TwoPoint { .. } => {
                    return Err(EstimatorError::Unsupported(
                        "annealed exact tails need Gaussian or point-mass displacements".into(),
                    ))
                }
            }
        }
        Ok(law)
    }

    fn convolve_two_point(&mut self, d: f64, p: f64) {
        let mut next = Vec::with_capacity(self.atoms.len() * 2);
        for &(v, lp) in &self.atoms {
            if p > 0.0 {
                next.push((v + d, lp + p.ln()));
            }
            if p < 1.0 {
                next.push((v - d, lp + (1.0 - p).ln()));
            }
        }
        next.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(next.len());
        for (v, lp) in next {
            match merged.last_mut() {
                Some(last) if (v - last.0).abs() <= 1e-9 * v.abs().max(1.0) => last.1 = log_add_exp(last.1, lp),
                _ => merged.push((v, lp)),
            }
        }
        self.atoms = merged;
    }

    pub fn mean(&self) -> f64 {
        self.gauss_mean + self.atoms.iter().map(|&(v, lp)| v * lp.exp()).sum::<f64>()
    }

    /// `log P(X >= y)`.
    pub fn log_upper_tail(&self, y: f64) -> f64 {
        let sd = self.gauss_var.sqrt();
        let terms: Vec<f64> = self
            .atoms
            .iter()
            .map(|&(v, lp)| {
                let z = y - v - self.gauss_mean;
                lp + if sd > 0.0 {
                    log_normal_upper_tail(z / sd)
                } else if z <= 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// `P(X <= y)`.
    pub fn cdf(&self, y: f64) -> f64 {
        let sd = self.gauss_var.sqrt();
        self.atoms
            .iter()
            .map(|&(v, lp)| {
                let z = y - v - self.gauss_mean;
                let c = if sd > 0.0 {
                    normal_cdf(z / sd)
                } else if z >= 0.0 {
                    1.0
                } else {
                    0.0
                };
                lp.exp() * c
            })
            .sum::<f64>()
            .min(1.0)
    }
}

/// `(1/n) log E_xi Z_n[nx, inf)` from the exact mean measure `P_n * (nu_0 * ... * nu_{n-1})`.
pub fn quenched_mean_ldp_exact(realization: &EnvRealization, x: f64, n: usize) -> Result<f64, EstimatorError> {
    if n == 0 || n > realization.len() {
        return Err(EstimatorError::InvalidArgument(format!(
            "n = {n} outside 1..={}",
            realization.len()
        )));
    }
    let states: Vec<&EnvState> = realization.states().take(n).collect();
    let law = PathLaw::along(states.iter().copied())?;
    let log_p: f64 = states.iter().map(|s| s.offspring_mean().ln()).sum();
    Ok((log_p + law.log_upper_tail(n as f64 * x)) / n as f64)
}

/// Which annealed mean measure to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealedMeasure {
    /// `E Z_n(.)`.
    Count,
    /// `E [Z_n(.) / P_n]`.
    Normalized,
}

/// `(1/n) log` of the annealed mean measure of `n[x, inf)` for an i.i.d.
/// environment, summing exactly over how often each state is visited.
pub fn annealed_mean_ldp_exact(model: &EnvironmentModel, x: f64, n: usize, measure: AnnealedMeasure) -> Result<f64, EstimatorError> {
    if !model.is_iid() {
        return Err(EstimatorError::Unsupported("annealed means need an i.i.d. environment".into()));
    }
    if n == 0 {
        return Err(EstimatorError::InvalidArgument("n must be >= 1".into()));
    }
    let states = model.states();
    let weights = model.weights();
    let mut counts = vec![0usize; states.len()];
    let mut terms = Vec::new();
    let log_fact: Vec<f64> = (0..=n).map(|k| libm::lgamma(k as f64 + 1.0)).collect();
    let y = n as f64 * x;
    let mut visit = |counts: &[usize]| -> Result<(), EstimatorError> {
        let mut lt = log_fact[n];
        for ((&k, &w), s) in counts.iter().zip(weights).zip(states) {
            if k == 0 {
                continue;
            }
            if w == 0.0 {
                return Ok(());
            }
            lt += k as f64 * w.ln() - log_fact[k];
            if measure == AnnealedMeasure::Count {
                lt += k as f64 * s.offspring_mean().ln();
            }
        }
        let law = PathLaw::from_counts(states, counts)?;
        terms.push(lt + law.log_upper_tail(y));
        Ok(())
    };
    compositions(&mut counts, 0, n, &mut visit)?;
    Ok(log_sum_exp(&terms) / n as f64)
}

/// Calls `f` on every vector of nonnegative counts summing to `remaining`.
fn compositions<F>(counts: &mut [usize], at: usize, remaining: usize, f: &mut F) -> Result<(), EstimatorError>
where
    F: FnMut(&[usize]) -> Result<(), EstimatorError>,
{
    if at + 1 == counts.len() {
        counts[at] = remaining;
        return f(counts);
    }
    for k in 0..=remaining {
        counts[at] = k;
        compositions(counts, at + 1, remaining - k, f)?;
    }
    counts[at] = 0;
    Ok(())
}
