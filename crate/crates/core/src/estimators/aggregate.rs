//! Per-replica summaries and their quenched, annealed and conditioned aggregates.

use serde::Serialize;

use super::clt::{ks_distance, normal_reference, normalized_cdf};
use super::{EstimatorError, SortedPositions};
use crate::env_model::{EnvRealization, QuenchedMoments};
use crate::numeric::{mean_and_se, median};
use crate::simulate::{SimConfig, TreeGrowth};

/// What to record for one tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryPlan {
    /// Generations to summarize, each `>= 1`.
    pub track: Vec<usize>,
    /// Points `x` for the counts `Z_n[nx, inf)` and `Z_n(-inf, nx]`.
    pub ldp_x: Vec<f64>,
    /// Standardized points for the normalized CDFs.
    pub clt_x: Vec<f64>,
    /// Window width for the local-limit comparison, if wanted.
    pub llt_h: Option<f64>,
    /// Per-step `(mean, variance)` pairs; generation `n` records `Z_n(-inf, n m + sqrt(n v) x]`
    /// for every `x` in `clt_x`.
    pub fixed_normalizers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub n: usize,
    pub count: u64,
    pub log_p: f64,
    pub r_n: f64,
    pub l_n: f64,
    pub w_n: f64,
    /// `W_n(t)` on the simulation t grid.
    pub w_n_t: Vec<f64>,
    /// `(1/n) log Z~_n(t)` on the simulation t grid.
    pub free_energy: Vec<f64>,
    pub upper_counts: Vec<u64>,
    pub lower_counts: Vec<u64>,
    /// Normalized CDF with the quenched `(a_n, b_n)`; absent when `b_n = 0`.
    pub clt_cdf: Option<Vec<f64>>,
    pub llt_sup_gap: Option<f64>,
    /// `b_n Z_n(a_n, a_n + h) / Z_n(R)`.
    pub llt_center: Option<f64>,
    pub fixed_counts: Vec<Vec<u64>>,
}

impl GenerationSummary {
    /// `(1/n) log Z_n[n x_j, inf)`.
    pub fn upper_rate(&self, j: usize) -> f64 {
        (self.upper_counts[j] as f64).ln() / self.n as f64
    }

    /// `(1/n) log Z_n(-inf, n x_j]`.
    pub fn lower_rate(&self, j: usize) -> f64 {
        (self.lower_counts[j] as f64).ln() / self.n as f64
    }

    /// `Z_n[n x_j, inf) / Z_n(R)`.
    pub fn upper_ratio(&self, j: usize) -> f64 {
        self.upper_counts[j] as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaSummary {
    pub replica_id: u64,
    pub environment_id: u64,
    /// Always true for the supported offspring laws, which have `N >= 1`.
    pub survived: bool,
    pub generations: Vec<GenerationSummary>,
}

impl ReplicaSummary {
    pub fn at(&self, n: usize) -> Option<&GenerationSummary> {
        self.generations.iter().find(|g| g.n == n)
    }
}

/// Grows one tree and summarizes the tracked generations.
pub fn summarize_replica(
    realization: &EnvRealization,
    moments: &QuenchedMoments,
    config: &SimConfig,
    replica_id: u64,
    plan: &SummaryPlan,
) -> Result<ReplicaSummary, EstimatorError> {
    if plan.track.contains(&0) {
        return Err(EstimatorError::InvalidArgument("tracked generations must be >= 1".into()));
    }
    if let Some(&n) = plan.track.iter().find(|&&n| n > config.horizon) {
        return Err(EstimatorError::InvalidArgument(format!(
            "tracked generation {n} beyond horizon {}",
            config.horizon
        )));
    }
    let mut growth = TreeGrowth::new(realization, config, replica_id)?;
    let mut generations = Vec::with_capacity(plan.track.len());
    while let Some(snapshot) = growth.next() {
        let snapshot = snapshot?;
        let n = snapshot.n;
        if !plan.track.contains(&n) {
            continue;
        }
        let sorted = SortedPositions::new(growth.positions().to_vec());
        let nf = n as f64;
        let clt_cdf = moments
            .normalizers(n)
            .ok()
            .map(|(a, b)| normalized_cdf(&sorted, a, b, &plan.clt_x));
        let (llt_sup_gap, llt_center) = match plan.llt_h {
            Some(h) if moments.non_lattice && moments.b(n) > 0.0 => {
                let (a, b) = moments.normalizers(n)?;
                let gap = super::clt::llt_gap_sorted(&sorted, moments, n, h, &super::clt::default_llt_grid(a, b))?;
                let center = b * sorted.count_open(a, a + h) as f64 / sorted.len() as f64;
                (Some(gap.sup_gap), Some(center))
            }
            _ => (None, None),
        };
        let fixed_counts = plan
            .fixed_normalizers
            .iter()
            .map(|&(m, v)| {
                let (center, scale) = (nf * m, (nf * v).sqrt());
                plan.clt_x
                    .iter()
                    .map(|&x| sorted.count_le(if x.is_infinite() { x } else { scale * x + center }))
                    .collect()
            })
            .collect();
        generations.push(GenerationSummary {
            n,
            count: snapshot.count,
            log_p: snapshot.log_p,
            r_n: snapshot.r_n,
            l_n: snapshot.l_n,
            w_n: snapshot.w_n,
            free_energy: snapshot.log_partition.iter().map(|lz| lz / nf).collect(),
            w_n_t: snapshot.w_n_t,
            upper_counts: plan.ldp_x.iter().map(|&x| sorted.count_ge(nf * x)).collect(),
            lower_counts: plan.ldp_x.iter().map(|&x| sorted.count_le(nf * x)).collect(),
            clt_cdf,
            llt_sup_gap,
            llt_center,
            fixed_counts,
        });
    }
    Ok(ReplicaSummary {
        replica_id,
        environment_id: realization.stream_id,
        survived: true,
        generations,
    })
}

/// How replicas are combined into one CDF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregateMode {
    /// Average of the normalized CDFs over trees grown in one shared environment.
    QuenchedMean,
    /// `sum_r Z_n^r(-inf, y] / sum_r Z_n^r(R)` over fresh environments,
    /// with thresholds from `fixed_normalizers[normalizer]`.
    AnnealedCount { normalizer: usize },
    /// Same with every replica weighted by `1 / P_n`.
    AnnealedNormalized { normalizer: usize },
    /// Average of the normalized CDFs over surviving replicas.
    Conditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarStat {
    pub name: String,
    pub mean: f64,
    pub se: f64,
    pub median: f64,
}

impl ScalarStat {
    fn of(name: impl Into<String>, xs: &[f64]) -> Self {
        let (mean, se) = mean_and_se(xs);
        Self {
            name: name.into(),
            mean,
            se,
            median: median(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub mode: AggregateMode,
    pub n: usize,
    pub replicas: usize,
    pub environments: usize,
    pub x_grid: Vec<f64>,
    pub cdf: Vec<f64>,
    pub reference: Vec<f64>,
    pub ks: f64,
    pub stats: Vec<ScalarStat>,
}

/// Folds replica summaries at generation `n`, in replica order.
pub fn aggregate(mode: AggregateMode, summaries: &[ReplicaSummary], n: usize, x_grid: &[f64]) -> Result<AggregateReport, EstimatorError> {
    if summaries.len() < 2 {
        return Err(EstimatorError::Usage(format!("aggregation needs at least 2 replicas, got {}", summaries.len())));
    }
    let mut env_ids: Vec<u64> = summaries.iter().map(|s| s.environment_id).collect();
    env_ids.sort_unstable();
    env_ids.dedup();
    match mode {
        AggregateMode::QuenchedMean if env_ids.len() != 1 => {
            return Err(EstimatorError::Usage("quenched aggregation needs one shared environment".into()))
        }
        AggregateMode::AnnealedCount { .. } | AggregateMode::AnnealedNormalized { .. } if env_ids.len() != summaries.len() => {
            return Err(EstimatorError::Usage("annealed aggregation needs a fresh environment per replica".into()))
        }
        _ => {}
    }
    let gens: Vec<&GenerationSummary> = summaries
        .iter()
        .filter(|s| mode != AggregateMode::Conditioned || s.survived)
        .map(|s| s.at(n).ok_or_else(|| EstimatorError::Usage(format!("replica {} did not record generation {n}", s.replica_id))))
        .collect::<Result<_, _>>()?;
    let cdf: Vec<f64> = match mode {
        AggregateMode::QuenchedMean | AggregateMode::Conditioned => {
            let mut acc = vec![0.0; x_grid.len()];
            for g in &gens {
                let c = g.clt_cdf.as_ref().ok_or(EstimatorError::Environment(crate::env_model::EnvError::DegenerateVariance { n }))?;
                if c.len() != x_grid.len() {
                    return Err(EstimatorError::GridMismatch { left: c.len(), right: x_grid.len() });
                }
                for (a, v) in acc.iter_mut().zip(c) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / gens.len() as f64).collect()
        }
        AggregateMode::AnnealedCount { normalizer } | AggregateMode::AnnealedNormalized { normalizer } => {
            let min_log_p = gens.iter().map(|g| g.log_p).fold(f64::INFINITY, f64::min);
            let weight = |g: &GenerationSummary| match mode {
                AggregateMode::AnnealedNormalized { .. } => (min_log_p - g.log_p).exp(),
                _ => 1.0,
            };
            let mut num = vec![0.0; x_grid.len()];
            let mut den = 0.0;
            for g in &gens {
                let counts = g
                    .fixed_counts
                    .get(normalizer)
                    .ok_or_else(|| EstimatorError::Usage(format!("no fixed normalizer {normalizer} recorded")))?;
                if counts.len() != x_grid.len() {
                    return Err(EstimatorError::GridMismatch { left: counts.len(), right: x_grid.len() });
                }
                let w = weight(g);
                for (a, &c) in num.iter_mut().zip(counts) {
                    *a += w * c as f64;
                }
                den += w * g.count as f64;
            }
            num.iter().map(|a| a / den).collect()
        }
    };
    let reference = normal_reference(x_grid);
    let ks = ks_distance(&cdf, &reference)?;
    let nf = n as f64;
    let mut stats = vec![
        ScalarStat::of("W_n", &gens.iter().map(|g| g.w_n).collect::<Vec<_>>()),
        ScalarStat::of("R_n/n", &gens.iter().map(|g| g.r_n / nf).collect::<Vec<_>>()),
        ScalarStat::of("L_n/n", &gens.iter().map(|g| g.l_n / nf).collect::<Vec<_>>()),
    ];
    let k = gens[0].free_energy.len();
    for j in 0..k {
        stats.push(ScalarStat::of(format!("free_energy[{j}]"), &gens.iter().map(|g| g.free_energy[j]).collect::<Vec<_>>()));
        stats.push(ScalarStat::of(format!("W_n(t)[{j}]"), &gens.iter().map(|g| g.w_n_t[j]).collect::<Vec<_>>()));
    }
    Ok(AggregateReport {
        mode,
        n,
        replicas: gens.len(),
        environments: env_ids.len(),
        x_grid: x_grid.to_vec(),
        cdf,
        reference,
        ks,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{quenched_moments, sample_environment, DisplacementLaw, EnvState, EnvironmentModel, OffspringLaw};
    use crate::numeric::linspace_step;
    use std::sync::Arc;

    fn plan() -> SummaryPlan {
        SummaryPlan {
            track: vec![4, 6],
            ldp_x: vec![0.0, 0.5],
            clt_x: linspace_step(-3.0, 3.0, 0.5),
            llt_h: Some(0.5),
            fixed_normalizers: vec![(0.0, 1.0)],
        }
    }

    fn model(d: DisplacementLaw) -> Arc<EnvironmentModel> {
        let s = EnvState::new("s", OffspringLaw::Deterministic { k: 2 }, d).unwrap();
        Arc::new(EnvironmentModel::constant(s).unwrap())
    }

    #[test]
    fn identical_deterministic_replicas_have_zero_error() {
        let m = model(DisplacementLaw::PointMass { at: 0.0 });
        let env = sample_environment(&m, 6, 1, 0).unwrap();
        let moments = quenched_moments(&env, &[0.0, 1.0]).unwrap();
        let cfg = SimConfig::new(6, vec![0.0, 1.0], 1);
        let mut p = plan();
        p.llt_h = None;
        let reps: Vec<_> = (0..3).map(|r| summarize_replica(&env, &moments, &cfg, r, &p).unwrap()).collect();
        // degenerate spread: the quenched CDF is refused, the annealed one is not
        assert!(aggregate(AggregateMode::QuenchedMean, &reps, 6, &p.clt_x).is_err());
        let g = reps[0].at(6).unwrap();
        assert_eq!(g.w_n, 1.0);
        assert_eq!(g.free_energy, vec![2f64.ln(), 2f64.ln()]);
        let fresh: Vec<_> = (0..3)
            .map(|r| {
                let env = sample_environment(&m, 6, 1, r + 1).unwrap();
                summarize_replica(&env, &moments, &cfg, r, &p).unwrap()
            })
            .collect();
        let rep = aggregate(AggregateMode::AnnealedCount { normalizer: 0 }, &fresh, 6, &p.clt_x).unwrap();
        for s in &rep.stats {
            assert_eq!(s.se, 0.0, "{}", s.name);
        }
    }

    #[test]
    fn quenched_mean_cdf_is_average_of_replica_cdfs() {
        let m = model(DisplacementLaw::Gaussian { mean: 0.0, variance: 1.0 });
        let env = sample_environment(&m, 6, 9, 0).unwrap();
        let moments = quenched_moments(&env, &[]).unwrap();
        let cfg = SimConfig::new(6, vec![], 9);
        let p = plan();
        let reps: Vec<_> = (0..4).map(|r| summarize_replica(&env, &moments, &cfg, r, &p).unwrap()).collect();
        let rep = aggregate(AggregateMode::QuenchedMean, &reps, 6, &p.clt_x).unwrap();
        for (j, &v) in rep.cdf.iter().enumerate() {
            let direct: f64 = reps.iter().map(|r| r.at(6).unwrap().clt_cdf.as_ref().unwrap()[j]).sum::<f64>() / 4.0;
            assert!((v - direct).abs() < 1e-15);
        }
        assert!(rep.cdf.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(rep.replicas, 4);
        assert!(reps[0].at(6).unwrap().llt_sup_gap.is_some());
    }

    #[test]
    fn mode_environment_mismatch_is_a_usage_error() {
        let m = model(DisplacementLaw::Gaussian { mean: 0.0, variance: 1.0 });
        let moments_env = sample_environment(&m, 4, 1, 0).unwrap();
        let moments = quenched_moments(&moments_env, &[]).unwrap();
        let cfg = SimConfig::new(4, vec![], 1);
        let mut p = plan();
        p.track = vec![4];
        let reps: Vec<_> = (0..2)
            .map(|r| {
                let env = sample_environment(&m, 4, 1, r).unwrap();
                summarize_replica(&env, &moments, &cfg, r, &p).unwrap()
            })
            .collect();
        assert!(matches!(aggregate(AggregateMode::QuenchedMean, &reps, 4, &p.clt_x), Err(EstimatorError::Usage(_))));
        let shared: Vec<_> = (0..2).map(|r| summarize_replica(&moments_env, &moments, &cfg, r, &p).unwrap()).collect();
        assert!(matches!(
            aggregate(AggregateMode::AnnealedCount { normalizer: 0 }, &shared, 4, &p.clt_x),
            Err(EstimatorError::Usage(_))
        ));
        assert!(matches!(aggregate(AggregateMode::Conditioned, &shared[..1], 4, &p.clt_x), Err(EstimatorError::Usage(_))));
    }
}
