//! Growth of the particle tree under a fixed environment path.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::env_model::{sample_point_process_into, EnvError, EnvRealization, QuenchedMoments};
use crate::numeric::CompensatedSum;
use crate::rng::StreamKey;

/// Default population cap, `2^24` particles.
pub const DEFAULT_CAP: usize = 1 << 24;

/// Particles expanded per parallel work item.
const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("population overflow: generation {generation} would hold more than {cap} particles (last complete generation: {reached})")]
    PopulationOverflow { generation: usize, reached: usize, cap: usize },
    #[error("partition function of an empty generation")]
    EmptyPositions,
    #[error("environment realization has {available} generations, run needs {needed}")]
    HorizonTooShort { needed: usize, available: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("t = {0} is not on the moments grid")]
    NotOnGrid(f64),
    #[error(transparent)]
    Environment(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub horizon: usize,
    pub cap: usize,
    pub t_grid: Vec<f64>,
    pub replicas: usize,
    pub master_seed: u64,
}

impl SimConfig {
    pub fn new(horizon: usize, t_grid: Vec<f64>, master_seed: u64) -> Self {
        Self {
            horizon,
            cap: DEFAULT_CAP,
            t_grid,
            replicas: 1,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::InvalidConfig("horizon must be >= 1".into()));
        }
        if self.cap == 0 {
            return Err(SimError::InvalidConfig("cap must be >= 1".into()));
        }
        if self.t_grid.iter().any(|t| !t.is_finite()) {
            return Err(SimError::InvalidConfig("t grid must be finite".into()));
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SimError::InvalidConfig("t grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// State of generation `n` of one tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSnapshot {
    pub n: usize,
    /// `Z_n(R)`.
    pub count: u64,
    /// Particle positions in ordinal order; dropped by [`GenerationSnapshot::without_positions`].
    #[serde(skip)]
    pub positions: Option<Vec<f64>>,
    /// Rightmost position `R_n`.
    pub r_n: f64,
    /// Leftmost position `L_n`.
    pub l_n: f64,
    pub t_grid: Vec<f64>,
    /// `log Z~_n(t)` on `t_grid`.
    pub log_partition: Vec<f64>,
    /// `log P_n`.
    pub log_p: f64,
    /// `W_n = Z_n(R) / P_n`.
    pub w_n: f64,
    /// `W_n(t)` on `t_grid`.
    pub w_n_t: Vec<f64>,
}

impl GenerationSnapshot {
    pub fn without_positions(mut self) -> Self {
        self.positions = None;
        self
    }

    /// `log Z~_n(t)`, from positions when available, otherwise from the stored grid.
    pub fn log_partition_at(&self, t: f64) -> Option<f64> {
        if let Some(k) = self.t_grid.iter().position(|&g| g == t) {
            return Some(self.log_partition[k]);
        }
        self.positions.as_deref().and_then(|p| partition_function(p, t).ok())
    }
}

/// `log sum_u exp(t S_u)` by max-subtracted, compensated log-sum-exp.
pub fn partition_function(positions: &[f64], t: f64) -> Result<f64, SimError> {
    let (max, sum) = partition_parts(positions, t)?;
    Ok(max + sum.ln())
}

/// `(M, S)` with `Z~ = exp(M) * S` and `M = max_u t S_u`.
fn partition_parts(positions: &[f64], t: f64) -> Result<(f64, f64), SimError> {
    if positions.is_empty() {
        return Err(SimError::EmptyPositions);
    }
    let max = positions.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(t * x));
    let sum: CompensatedSum = positions.iter().map(|&x| (t * x - max).exp()).collect();
    Ok((max, sum.value()))
}

/// `exp(M) * S / prod`, falling back to log space when the linear form is not finite.
/// The linear form keeps exact cases exact (integer counts over integer products).
fn normalized_ratio(max: f64, sum: f64, prod: f64, log_prod: f64) -> f64 {
    let lin = max.exp() * sum / prod;
    if prod.is_finite() && prod > 0.0 && lin.is_finite() && lin > 0.0 {
        lin
    } else {
        (max + sum.ln() - log_prod).exp()
    }
}

/// `W_n(t) = Z~_n(t) / E_xi Z~_n(t)`.
pub fn additive_martingale(snapshot: &GenerationSnapshot, t: f64, moments: &QuenchedMoments) -> Result<f64, SimError> {
    let k = moments.grid_index(t).ok_or(SimError::NotOnGrid(t))?;
    if let Some(j) = snapshot.t_grid.iter().position(|&g| g == t) {
        return Ok(snapshot.w_n_t[j]);
    }
    let positions = snapshot.positions.as_deref().ok_or(SimError::NotOnGrid(t))?;
    let (max, sum) = partition_parts(positions, t)?;
    let log_prod = moments.cumulative_log_laplace[snapshot.n][k];
    Ok(normalized_ratio(max, sum, log_prod.exp(), log_prod))
}

/// Iterator over the generations `0..=horizon` of one tree.
///
/// Snapshots are emitted without positions; read them through
/// [`TreeGrowth::positions`] before advancing.
pub struct TreeGrowth<'a> {
    realization: &'a EnvRealization,
    config: &'a SimConfig,
    replica: u64,
    next_generation: usize,
    positions: Vec<f64>,
    log_p: CompensatedSum,
    cumulative_log_laplace: Vec<CompensatedSum>,
    p_linear: f64,
    laplace_linear: Vec<f64>,
    failed: bool,
}

impl<'a> TreeGrowth<'a> {
    pub fn new(realization: &'a EnvRealization, config: &'a SimConfig, replica: u64) -> Result<Self, SimError> {
        config.validate()?;
        if realization.len() < config.horizon {
            return Err(SimError::HorizonTooShort {
                needed: config.horizon,
                available: realization.len(),
            });
        }
        Ok(Self {
            realization,
            config,
            replica,
            next_generation: 0,
            positions: vec![0.0],
            log_p: CompensatedSum::new(),
            cumulative_log_laplace: vec![CompensatedSum::new(); config.t_grid.len()],
            p_linear: 1.0,
            laplace_linear: vec![1.0; config.t_grid.len()],
            failed: false,
        })
    }

    /// Positions of the most recently emitted generation, in ordinal order.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Consumes the growth, returning the positions of the last emitted generation.
    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    fn snapshot(&self, n: usize) -> GenerationSnapshot {
        let positions = &self.positions;
        let count = positions.len() as u64;
        let (l_n, r_n) = positions
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let parts: Vec<(f64, f64)> = self
            .config
            .t_grid
            .iter()
            .map(|&t| partition_parts(positions, t).expect("generation is never empty"))
            .collect();
        let log_partition = parts.iter().map(|(m, s)| m + s.ln()).collect();
        let log_p = self.log_p.value();
        let w_n_t = parts
            .iter()
            .zip(&self.laplace_linear)
            .zip(&self.cumulative_log_laplace)
            .map(|((&(m, s), &prod), c)| normalized_ratio(m, s, prod, c.value()))
            .collect();
        GenerationSnapshot {
            n,
            count,
            positions: None,
            r_n,
            l_n,
            t_grid: self.config.t_grid.clone(),
            log_partition,
            log_p,
            w_n: normalized_ratio(0.0, count as f64, self.p_linear, log_p),
            w_n_t,
        }
    }

    /// Replaces every particle of generation `n` by its children.
    fn expand(&mut self, n: usize) -> Result<(), SimError> {
        let state = self.realization.state(n);
        let key_base = (self.config.master_seed, self.replica, n as u64);
        let cap = self.config.cap;
        let total = AtomicUsize::new(0);
        let chunks: Vec<Option<Vec<f64>>> = self
            .positions
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, parents)| {
                if total.load(Ordering::Relaxed) > cap {
                    return None;
                }
                let mut children = Vec::with_capacity(parents.len() * 2);
                let mut offsets = Vec::new();
                for (j, &parent) in parents.iter().enumerate() {
                    let ordinal = (c * CHUNK + j) as u64;
                    let mut rng = StreamKey::new(key_base.0, key_base.1, key_base.2, ordinal).rng();
                    offsets.clear();
                    sample_point_process_into(state, &mut rng, &mut offsets);
                    children.extend(offsets.iter().map(|&l| parent + l));
                }
                total.fetch_add(children.len(), Ordering::Relaxed);
                Some(children)
            })
            .collect();
        let overflow = SimError::PopulationOverflow {
            generation: n + 1,
            reached: n,
            cap,
        };
        let mut sizes = 0usize;
        for c in &chunks {
            match c {
                Some(v) => sizes += v.len(),
                None => return Err(overflow),
            }
        }
        if sizes > cap {
            return Err(overflow);
        }
        let mut next = Vec::with_capacity(sizes);
        for c in chunks.into_iter().flatten() {
            next.extend_from_slice(&c);
        }
        self.positions = next;
        self.log_p.add(state.offspring_mean().ln());
        self.p_linear *= state.offspring_mean();
        for ((c, lin), &t) in self
            .cumulative_log_laplace
            .iter_mut()
            .zip(&mut self.laplace_linear)
            .zip(&self.config.t_grid)
        {
            c.add(state.log_laplace(t));
            *lin *= crate::env_model::laplace_m(state, t);
        }
        Ok(())
    }
}

impl Iterator for TreeGrowth<'_> {
    type Item = Result<GenerationSnapshot, SimError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_generation > self.config.horizon {
            return None;
        }
        let n = self.next_generation;
        if n > 0 {
            if let Err(e) = self.expand(n - 1) {
                self.failed = true;
                return Some(Err(e));
            }
        }
        self.next_generation += 1;
        Some(Ok(self.snapshot(n)))
    }
}

/// Grows one tree and returns the snapshots of generations `0..=horizon`,
/// each carrying its positions.
pub fn run_tree(realization: &EnvRealization, config: &SimConfig, replica_id: u64) -> Result<Vec<GenerationSnapshot>, SimError> {
    let mut growth = TreeGrowth::new(realization, config, replica_id)?;
    let mut out = Vec::with_capacity(config.horizon + 1);
    while let Some(s) = growth.next() {
        let mut s = s?;
        s.positions = Some(growth.positions().to_vec());
        out.push(s);
    }
    Ok(out)
}

/// Grows one tree, keeping positions only for the final generation.
pub fn run_tree_final(
    realization: &EnvRealization,
    config: &SimConfig,
    replica_id: u64,
) -> Result<(Vec<GenerationSnapshot>, Vec<f64>), SimError> {
    let mut growth = TreeGrowth::new(realization, config, replica_id)?;
    let snaps = growth.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((snaps, growth.into_positions()))
}

/// Column header of [`snapshot_rows`].
pub fn snapshot_header(t_grid: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = ["n", "count", "R_n", "L_n", "W_n"].iter().map(|s| s.to_string()).collect();
    h.extend(t_grid.iter().map(|t| format!("logZ(t={t})")));
    h
}

/// One CSV row per generation: `n, count, R_n, L_n, W_n, log Z~_n(t)...`.
pub fn snapshot_rows(snapshots: &[GenerationSnapshot]) -> Vec<Vec<f64>> {
    snapshots
        .iter()
        .map(|s| {
            let mut row = vec![s.n as f64, s.count as f64, s.r_n, s.l_n, s.w_n];
            row.extend_from_slice(&s.log_partition);
            row
        })
        .collect()
}
