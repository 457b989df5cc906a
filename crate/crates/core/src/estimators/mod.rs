//! Empirical quantities computed from simulated generations.

pub mod aggregate;
pub mod clt;
pub mod kernel;
pub mod ldp;

use thiserror::Error;

use crate::env_model::EnvError;
use crate::simulate::{GenerationSnapshot, SimError};

pub use aggregate::{aggregate, summarize_replica, AggregateMode, AggregateReport, GenerationSummary, ReplicaSummary, ScalarStat, SummaryPlan};
pub use clt::{clt_cdf_sorted, clt_empirical_cdf, default_llt_grid, ks_distance, llt_gap, llt_gap_sorted, normal_reference, normalized_cdf, LltGap};
pub use kernel::{fejer_kernel, fejer_kernel_scaled, fejer_smooth, fejer_smooth_positions, smoothing_grid, smoothing_grid_between, trapezoid};
pub use ldp::{annealed_mean_ldp_exact, ldp_rates_sorted, free_energy_curve, ldp_interval_rates, quenched_mean_ldp_exact, AnnealedMeasure, FreeEnergyCurve, LdpRates, PathLaw};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("generation {n} has no stored positions (population above the cap or positions dropped)")]
    MissingPositions { n: usize },
    #[error("lattice displacement law: the local limit comparison needs non-lattice laws in every state")]
    Lattice,
    #[error("grid mismatch: {left} values against {right}")]
    GridMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// Positions of one generation sorted ascending, for interval counts by binary search.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedPositions {
    xs: Vec<f64>,
}

impl SortedPositions {
    pub fn new(mut xs: Vec<f64>) -> Self {
        xs.sort_unstable_by(f64::total_cmp);
        Self { xs }
    }

    pub fn from_snapshot(snapshot: &GenerationSnapshot) -> Result<Self, EstimatorError> {
        snapshot
            .positions
            .as_ref()
            .map(|p| Self::new(p.clone()))
            .ok_or(EstimatorError::MissingPositions { n: snapshot.n })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.xs
    }

    /// `#{x_u <= y}`.
    pub fn count_le(&self, y: f64) -> u64 {
        self.xs.partition_point(|&x| x <= y) as u64
    }

    /// `#{x_u < y}`.
    pub fn count_lt(&self, y: f64) -> u64 {
        self.xs.partition_point(|&x| x < y) as u64
    }

    /// `#{x_u >= y}`.
    pub fn count_ge(&self, y: f64) -> u64 {
        self.xs.len() as u64 - self.count_lt(y)
    }

    /// `#{x_u > y}`.
    pub fn count_gt(&self, y: f64) -> u64 {
        self.xs.len() as u64 - self.count_le(y)
    }

    /// `#{lo < x_u < hi}`.
    pub fn count_open(&self, lo: f64, hi: f64) -> u64 {
        self.count_lt(hi).saturating_sub(self.count_le(lo))
    }
}
