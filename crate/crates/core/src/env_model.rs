//! Reproduction laws, environment sequences and their per-generation moments.
//!
//! An [`EnvState`] is one letter of the environment: an offspring law for `N`
//! together with a displacement law from which the `N` children offsets are
//! drawn i.i.d. and independently of `N`. Because of that product form the
//! Laplace transform of the reproduction point process factorises as
//! `m(t) = E[N] * E[exp(t L)]` and every quantity below has a closed form.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::CompensatedSum;
use crate::rng::{StreamKey, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid law for state `{state}`: {reason}")]
    InvalidLaw { state: String, reason: String },
    #[error("environment probabilities: {0}")]
    Probabilities(String),
    #[error("Markov environment is not irreducible: state `{from}` cannot reach `{to}`")]
    NotIrreducible { from: String, to: String },
    #[error("environment is not supercritical: E log m0 = {mean_log_offspring} <= 0")]
    NotSupercritical { mean_log_offspring: f64 },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("state index {index} out of range for {len} states")]
    UnknownState { index: usize, len: usize },
    #[error("degenerate displacement: b_n = 0 at generation {n}")]
    DegenerateVariance { n: usize },
    #[error("generation {n} beyond the realization horizon {horizon}")]
    BeyondHorizon { n: usize, horizon: usize },
}

/// Law of the number of children. Every variant has `N >= 1` almost surely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum OffspringLaw {
    Deterministic { k: u32 },
    /// `P(N = j) = p (1-p)^(j-1)` for `j >= 1`.
    ShiftedGeometric { p: f64 },
    /// Poisson(lambda) conditioned on being positive.
    PoissonConditionedPositive { lambda: f64 },
}

impl OffspringLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            OffspringLaw::Deterministic { k } => k as f64,
            OffspringLaw::ShiftedGeometric { p } => 1.0 / p,
            OffspringLaw::PoissonConditionedPositive { lambda } => lambda / -(-lambda).exp_m1(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            OffspringLaw::Deterministic { k: 0 } => Err("deterministic k must be >= 1".into()),
            OffspringLaw::ShiftedGeometric { p } if !(p > 0.0 && p <= 1.0) => {
                Err(format!("geometric p must lie in (0, 1], got {p}"))
            }
            OffspringLaw::PoissonConditionedPositive { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(format!("poisson lambda must be positive and finite, got {lambda}"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            OffspringLaw::Deterministic { k } => k as usize,
            OffspringLaw::ShiftedGeometric { p } => {
                if p >= 1.0 {
                    1
                } else {
                    1 + Geometric::new(p).expect("validated p").sample(rng) as usize
                }
            }
            OffspringLaw::PoissonConditionedPositive { lambda } => {
                let poisson = Poisson::new(lambda).expect("validated lambda");
                loop {
                    let k: f64 = poisson.sample(rng);
                    if k >= 1.0 {
                        break k as usize;
                    }
                }
            }
        }
    }
}

/// Law of a single child offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DisplacementLaw {
    PointMass { at: f64 },
    Gaussian { mean: f64, variance: f64 },
    /// `+d` with probability `p`, `-d` with probability `1-p`.
    TwoPoint { d: f64, p: f64 },
}

impl DisplacementLaw {
    fn validate(&self) -> Result<(), String> {
        match *self {
            DisplacementLaw::PointMass { at } if !at.is_finite() => Err("point mass must be finite".into()),
            DisplacementLaw::Gaussian { mean, variance } if !(mean.is_finite() && variance > 0.0 && variance.is_finite()) => {
                Err(format!("gaussian needs finite mean and variance > 0, got ({mean}, {variance})"))
            }
            DisplacementLaw::TwoPoint { d, p } if !(d.is_finite() && d >= 0.0 && (0.0..=1.0).contains(&p)) => {
                Err(format!("two-point law needs d >= 0 and p in [0, 1], got (d={d}, p={p})"))
            }
            _ => Ok(()),
        }
    }

    /// `log E[exp(t L)]`.
    pub fn log_mgf(&self, t: f64) -> f64 {
        match *self {
            DisplacementLaw::PointMass { at } => t * at,
            DisplacementLaw::Gaussian { mean, variance } => mean * t + 0.5 * variance * t * t,
            DisplacementLaw::TwoPoint { d, p } => {
                // factor out the larger exponential so t = 0 gives exactly 0
                let s = t * d;
                if s >= 0.0 {
                    s + (p + (1.0 - p) * (-2.0 * s).exp()).ln()
                } else {
                    -s + (p * (2.0 * s).exp() + (1.0 - p)).ln()
                }
            }
        }
    }

    /// `d/dt log E[exp(t L)]`, the mean of the exponentially tilted law.
    pub fn log_mgf_prime(&self, t: f64) -> f64 {
        match *self {
            DisplacementLaw::PointMass { at } => at,
            DisplacementLaw::Gaussian { mean, variance } => mean + variance * t,
            DisplacementLaw::TwoPoint { d, p } => {
                if p >= 1.0 {
                    d
                } else if p <= 0.0 {
                    -d
                } else {
                    d * (0.5 * (p / (1.0 - p)).ln() + t * d).tanh()
                }
            }
        }
    }

    /// `d^2/dt^2 log E[exp(t L)]`, the variance of the tilted law.
    pub fn log_mgf_second(&self, t: f64) -> f64 {
        match *self {
            DisplacementLaw::PointMass { .. } => 0.0,
            DisplacementLaw::Gaussian { variance, .. } => variance,
            DisplacementLaw::TwoPoint { d, .. } => {
                let m = self.log_mgf_prime(t);
                d * d - m * m
            }
        }
    }

    /// Limit of the tilted mean as `t -> +inf` (`upper`) or `t -> -inf`.
    pub fn tilted_mean_limit(&self, upper: bool) -> f64 {
        let sign = if upper { 1.0 } else { -1.0 };
        match *self {
            DisplacementLaw::PointMass { at } => at,
            DisplacementLaw::Gaussian { .. } => sign * f64::INFINITY,
            DisplacementLaw::TwoPoint { d, p } => {
                let reachable_up = if upper { p > 0.0 } else { p < 1.0 };
                if reachable_up {
                    sign * d
                } else {
                    -sign * d
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DisplacementLaw::PointMass { at } => at,
            DisplacementLaw::Gaussian { mean, .. } => mean,
            DisplacementLaw::TwoPoint { d, p } => d * (2.0 * p - 1.0),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            DisplacementLaw::PointMass { .. } => 0.0,
            DisplacementLaw::Gaussian { variance, .. } => variance,
            DisplacementLaw::TwoPoint { d, p } => 4.0 * d * d * p * (1.0 - p),
        }
    }

    /// Point masses and two-point laws live on arithmetic progressions.
    pub fn is_lattice(&self) -> bool {
        !matches!(self, DisplacementLaw::Gaussian { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DisplacementLaw::PointMass { at } => at,
            DisplacementLaw::Gaussian { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            DisplacementLaw::TwoPoint { d, p } => {
                if rng.random::<f64>() < p {
                    d
                } else {
                    -d
                }
            }
        }
    }
}

/// One environment letter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub label: String,
    pub offspring: OffspringLaw,
    pub displacement: DisplacementLaw,
}

impl EnvState {
    pub fn new(label: impl Into<String>, offspring: OffspringLaw, displacement: DisplacementLaw) -> Result<Self, EnvError> {
        let state = Self {
            label: label.into(),
            offspring,
            displacement,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.offspring
            .validate()
            .and_then(|_| self.displacement.validate())
            .map_err(|reason| EnvError::InvalidLaw {
                state: self.label.clone(),
                reason,
            })
    }

    /// Mean offspring number `m0 = E N`.
    pub fn offspring_mean(&self) -> f64 {
        self.offspring.mean()
    }

    /// `log m0(t)`; finite for every real `t`.
    pub fn log_laplace(&self, t: f64) -> f64 {
        self.offspring_mean().ln() + self.displacement.log_mgf(t)
    }
}

/// `m0(t) = E sum_i exp(t L_i)` in closed form.
pub fn laplace_m(state: &EnvState, t: f64) -> f64 {
    state.offspring_mean() * state.displacement.log_mgf(t).exp()
}

/// Derivative of [`laplace_m`] in `t`.
pub fn laplace_m_prime(state: &EnvState, t: f64) -> f64 {
    laplace_m(state, t) * state.displacement.log_mgf_prime(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentKind {
    Constant,
    Iid { probs: Vec<f64> },
    Markov { transition: Vec<Vec<f64>> },
}

/// Law of a stationary ergodic environment over a finite state space.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentModel {
    states: Vec<EnvState>,
    kind: EnvironmentKind,
    /// Marginal law of a single letter (stationary vector for Markov chains).
    weights: Vec<f64>,
}

const PROB_TOL: f64 = 1e-12;

impl EnvironmentModel {
    pub fn constant(state: EnvState) -> Result<Self, EnvError> {
        state.validate()?;
        Ok(Self {
            states: vec![state],
            kind: EnvironmentKind::Constant,
            weights: vec![1.0],
        })
    }

    pub fn iid(states: Vec<EnvState>, probs: Vec<f64>) -> Result<Self, EnvError> {
        validate_states(&states)?;
        check_distribution(&probs, states.len(), "probs")?;
        Ok(Self {
            weights: probs.clone(),
            states,
            kind: EnvironmentKind::Iid { probs },
        })
    }

    pub fn markov(states: Vec<EnvState>, transition: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        validate_states(&states)?;
        if transition.len() != states.len() {
            return Err(EnvError::Probabilities(format!(
                "transition matrix has {} rows for {} states",
                transition.len(),
                states.len()
            )));
        }
        for (i, row) in transition.iter().enumerate() {
            check_distribution(row, states.len(), &format!("transition row {i}"))?;
        }
        check_irreducible(&states, &transition)?;
        let weights = stationary_distribution(&transition);
        Ok(Self {
            states,
            kind: EnvironmentKind::Markov { transition },
            weights,
        })
    }

    pub fn from_kind(states: Vec<EnvState>, kind: EnvironmentKind) -> Result<Self, EnvError> {
        match kind {
            EnvironmentKind::Constant => {
                if states.len() != 1 {
                    return Err(EnvError::Probabilities(format!(
                        "constant environment needs exactly one state, got {}",
                        states.len()
                    )));
                }
                Self::constant(states.into_iter().next().expect("one state"))
            }
            EnvironmentKind::Iid { probs } => Self::iid(states, probs),
            EnvironmentKind::Markov { transition } => Self::markov(states, transition),
        }
    }

    pub fn states(&self) -> &[EnvState] {
        &self.states
    }

    pub fn kind(&self) -> &EnvironmentKind {
        &self.kind
    }

    /// Marginal law of `xi_0`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `true` for constant and i.i.d. environments.
    pub fn is_iid(&self) -> bool {
        !matches!(self.kind, EnvironmentKind::Markov { .. })
    }

    /// Exact finite expectation `E f(xi_0)`.
    pub fn expectation<F: Fn(&EnvState) -> f64>(&self, f: F) -> f64 {
        self.states
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(s, &w)| w * f(s))
            .collect::<CompensatedSum>()
            .value()
    }

    /// `E log m0`.
    pub fn mean_log_offspring(&self) -> f64 {
        self.expectation(|s| s.offspring_mean().ln())
    }

    pub fn check_supercritical(&self) -> Result<(), EnvError> {
        let v = self.mean_log_offspring();
        if v > 0.0 {
            Ok(())
        } else {
            Err(EnvError::NotSupercritical { mean_log_offspring: v })
        }
    }

    pub fn any_lattice(&self) -> bool {
        self.states.iter().any(|s| s.displacement.is_lattice())
    }
}

fn validate_states(states: &[EnvState]) -> Result<(), EnvError> {
    if states.is_empty() {
        return Err(EnvError::Probabilities("at least one state is required".into()));
    }
    states.iter().try_for_each(EnvState::validate)
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<(), EnvError> {
    if p.len() != len {
        return Err(EnvError::Probabilities(format!("{what} has {} entries for {len} states", p.len())));
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(EnvError::Probabilities(format!("{what} entries must lie in [0, 1]")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(EnvError::Probabilities(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

fn check_irreducible(states: &[EnvState], transition: &[Vec<f64>]) -> Result<(), EnvError> {
    let n = states.len();
    for from in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(i) = stack.pop() {
            for (j, &p) in transition[i].iter().enumerate() {
                if p > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(to) = seen.iter().position(|&s| !s) {
            return Err(EnvError::NotIrreducible {
                from: states[from].label.clone(),
                to: states[to].label.clone(),
            });
        }
    }
    Ok(())
}

/// Solves `pi P = pi`, `sum pi = 1` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    // Rows of (P^T - I) with the last equation replaced by normalisation.
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, row) in a.iter_mut().enumerate() {
        for j in 0..n {
            row[j] = transition[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[n - 1][j] = 1.0;
    }
    a[n - 1][n] = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("nonempty");
        a.swap(col, pivot);
        let p = a[col][col];
        for k in col..=n {
            a[col][k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    a.iter().map(|row| row[n].max(0.0)).collect()
}

/// One sampled environment path `xi_0 .. xi_{n-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRealization {
    model: Arc<EnvironmentModel>,
    indices: Vec<usize>,
    pub master_seed: u64,
    pub stream_id: u64,
}

impl EnvRealization {
    /// A realization with explicitly chosen letters.
    pub fn from_indices(model: Arc<EnvironmentModel>, indices: Vec<usize>) -> Result<Self, EnvError> {
        if indices.is_empty() {
            return Err(EnvError::EmptyHorizon);
        }
        let len = model.states().len();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(EnvError::UnknownState { index, len });
        }
        Ok(Self {
            model,
            indices,
            master_seed: 0,
            stream_id: 0,
        })
    }

    pub fn model(&self) -> &Arc<EnvironmentModel> {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn state(&self, generation: usize) -> &EnvState {
        &self.model.states()[self.indices[generation]]
    }

    pub fn states(&self) -> impl Iterator<Item = &EnvState> + '_ {
        self.indices.iter().map(move |&i| &self.model.states()[i])
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `xi_0 .. xi_{n-1}` from the environment law.
///
/// Markov chains start from their stationary vector, so the path is stationary.
/// The result only depends on `(model, n, seed, stream_id)`.
pub fn sample_environment(
    model: &Arc<EnvironmentModel>,
    n: usize,
    seed: u64,
    stream_id: u64,
) -> Result<EnvRealization, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptyHorizon);
    }
    let mut rng = StreamKey::environment(seed, stream_id).rng();
    let indices = match model.kind() {
        EnvironmentKind::Constant => vec![0; n],
        EnvironmentKind::Iid { probs } => (0..n).map(|_| sample_index(probs, &mut rng)).collect(),
        EnvironmentKind::Markov { transition } => {
            let mut out = Vec::with_capacity(n);
            let mut current = sample_index(model.weights(), &mut rng);
            out.push(current);
            for _ in 1..n {
                current = sample_index(&transition[current], &mut rng);
                out.push(current);
            }
            out
        }
    };
    Ok(EnvRealization {
        model: Arc::clone(model),
        indices,
        master_seed: seed,
        stream_id,
    })
}

/// Offsets of the children of one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProcess {
    pub offsets: Vec<f64>,
}

impl PointProcess {
    pub fn count(&self) -> usize {
        self.offsets.len()
    }
}

/// Samples `N` then `N` i.i.d. offsets, appending the offsets to `out`.
/// Returns `N`.
#[inline]
pub fn sample_point_process_into<R: Rng + ?Sized>(state: &EnvState, rng: &mut R, out: &mut Vec<f64>) -> usize {
    let n = state.offspring.sample(rng);
    out.reserve(n);
    for _ in 0..n {
        out.push(state.displacement.sample(rng));
    }
    n
}

pub fn sample_point_process(state: &EnvState, rng: &mut StreamRng) -> PointProcess {
    let mut offsets = Vec::new();
    sample_point_process_into(state, rng, &mut offsets);
    PointProcess { offsets }
}

/// Per-generation moments of the intensity measures `nu_i` under a fixed environment,
/// with their cumulative sums.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuenchedMoments {
    pub t_grid: Vec<f64>,
    /// `m_i = E_xi N`.
    pub offspring_mean: Vec<f64>,
    /// `log m_i(t)` for every grid point, indexed `[i][k]`.
    pub log_laplace: Vec<Vec<f64>>,
    /// Mean `mu_i` of `nu_i`.
    pub mean: Vec<f64>,
    /// Variance `sigma_i^2` of `nu_i`.
    pub variance: Vec<f64>,
    /// `log P_n`, `n = 0..=horizon`.
    pub log_p: Vec<f64>,
    /// `a_n = sum_{i<n} mu_i`.
    pub a: Vec<f64>,
    /// `b_n^2 = sum_{i<n} sigma_i^2`.
    pub b_squared: Vec<f64>,
    /// `sum_{i<n} log m_i(t)`, indexed `[n][k]`.
    pub cumulative_log_laplace: Vec<Vec<f64>>,
    /// No displacement law along the path is lattice.
    pub non_lattice: bool,
}

impl QuenchedMoments {
    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, n: usize) -> Result<(), EnvError> {
        if n > self.horizon() {
            Err(EnvError::BeyondHorizon { n, horizon: self.horizon() })
        } else {
            Ok(())
        }
    }

    pub fn log_p(&self, n: usize) -> f64 {
        self.log_p[n]
    }

    pub fn a(&self, n: usize) -> f64 {
        self.a[n]
    }

    pub fn b(&self, n: usize) -> f64 {
        self.b_squared[n].sqrt()
    }

    /// `(a_n, b_n)`, refusing a degenerate `b_n = 0`.
    pub fn normalizers(&self, n: usize) -> Result<(f64, f64), EnvError> {
        self.check(n)?;
        let b = self.b(n);
        if b > 0.0 {
            Ok((self.a(n), b))
        } else {
            Err(EnvError::DegenerateVariance { n })
        }
    }

    /// `true` when every generation has zero displacement variance.
    pub fn is_degenerate(&self) -> bool {
        self.b_squared.last().is_none_or(|&b2| b2 == 0.0)
    }

    /// Index of `t` on the grid, exact match only.
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        self.t_grid.iter().position(|&g| g == t)
    }
}

/// Computes [`QuenchedMoments`] along the whole realization.
pub fn quenched_moments(realization: &EnvRealization, t_grid: &[f64]) -> Result<QuenchedMoments, EnvError> {
    if realization.is_empty() {
        return Err(EnvError::EmptyHorizon);
    }
    let n = realization.len();
    let mut out = QuenchedMoments {
        t_grid: t_grid.to_vec(),
        offspring_mean: Vec::with_capacity(n),
        log_laplace: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        variance: Vec::with_capacity(n),
        log_p: vec![0.0],
        a: vec![0.0],
        b_squared: vec![0.0],
        cumulative_log_laplace: vec![vec![0.0; t_grid.len()]],
        non_lattice: true,
    };
    let mut log_p = CompensatedSum::new();
    let mut a = CompensatedSum::new();
    let mut b2 = CompensatedSum::new();
    let mut cum: Vec<CompensatedSum> = vec![CompensatedSum::new(); t_grid.len()];
    for state in realization.states() {
        let m = state.offspring_mean();
        let mu = state.displacement.mean();
        let var = state.displacement.variance();
        let row: Vec<f64> = t_grid.iter().map(|&t| state.log_laplace(t)).collect();
        log_p.add(m.ln());
        a.add(mu);
        b2.add(var);
        for (c, &v) in cum.iter_mut().zip(&row) {
            c.add(v);
        }
        out.non_lattice &= !state.displacement.is_lattice();
        out.offspring_mean.push(m);
        out.mean.push(mu);
        out.variance.push(var);
        out.log_laplace.push(row);
        out.log_p.push(log_p.value());
        out.a.push(a.value());
        out.b_squared.push(b2.value());
        out.cumulative_log_laplace.push(cum.iter().map(CompensatedSum::value).collect());
    }
    Ok(out)
}
