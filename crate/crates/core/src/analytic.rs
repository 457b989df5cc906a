//! Deterministic limit objects of the process.
//!
//! Everything here is an exact finite expectation over the environment's
//! marginal law, so no Monte Carlo error enters the predictions:
//!
//! * `lambda(t) = E log m0(t)` and its derivative,
//! * the convex conjugate `lambda*` by monotone root finding,
//! * the critical temperatures `t-`, `t+` (roots of `rho(t) = t lambda'(t) - lambda(t)`),
//! * the free-energy limit `lambda~` and the extreme-particle speeds,
//! * annealed log-moment functions and the annealed CLT parameters.

use serde::Serialize;
use thiserror::Error;

use crate::env_model::{EnvError, EnvironmentModel};
use crate::numeric::{bisect_increasing, log_sum_exp, CompensatedSum};

/// Largest `|t|` searched for critical temperatures and conjugate maximisers.
/// Beyond it a critical temperature is reported as infinite.
pub const T_MAX: f64 = 64.0;

/// Residual accepted for `rho(t_pm) = 0`.
pub const RHO_TOL: f64 = 1e-8;

/// Relative residual accepted for `f'(t*) = x` in [`legendre`].
pub const SLOPE_TOL: f64 = 1e-10;

const PROBE_POINTS: usize = 129;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("function is not convex on the probe grid near t = {t}: {detail}")]
    NonConvex { t: f64, detail: String },
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error("{operation} requires an i.i.d. environment")]
    UnsupportedVariant { operation: &'static str },
    #[error("root finding did not reach tolerance: {0}")]
    NoConvergence(String),
}

/// A convex, differentiable function of one variable.
pub trait ConvexFunction {
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
}

impl<F: ConvexFunction + ?Sized> ConvexFunction for &F {
    fn value(&self, t: f64) -> f64 {
        (**self).value(t)
    }
    fn derivative(&self, t: f64) -> f64 {
        (**self).derivative(t)
    }
}

/// `lambda(t) = E log m0(t)` for a finite-state environment.
#[derive(Debug, Clone, Copy)]
pub struct QuenchedLogMoment<'a> {
    pub model: &'a EnvironmentModel,
}

impl ConvexFunction for QuenchedLogMoment<'_> {
    fn value(&self, t: f64) -> f64 {
        lambda_of_t(self.model, t)
    }

    fn derivative(&self, t: f64) -> f64 {
        lambda_prime_of_t(self.model, t)
    }
}

/// `lambda(t)`: weighted sum of `log m0(t)` over states.
pub fn lambda_of_t(model: &EnvironmentModel, t: f64) -> f64 {
    model.expectation(|s| s.log_laplace(t))
}

/// `lambda'(t) = E[m0'(t) / m0(t)]`, from the closed-form derivative.
pub fn lambda_prime_of_t(model: &EnvironmentModel, t: f64) -> f64 {
    model.expectation(|s| s.displacement.log_mgf_prime(t))
}

/// `lambda''(t)`.
pub fn lambda_second_of_t(model: &EnvironmentModel, t: f64) -> f64 {
    model.expectation(|s| s.displacement.log_mgf_second(t))
}

/// `rho(t) = t lambda'(t) - lambda(t)`.
pub fn rho_of_t(model: &EnvironmentModel, t: f64) -> f64 {
    t * lambda_prime_of_t(model, t) - lambda_of_t(model, t)
}

fn check_convex<F: ConvexFunction>(f: &F, lo: f64, hi: f64) -> Result<(), AnalyticError> {
    let step = (hi - lo) / (PROBE_POINTS - 1) as f64;
    let ts: Vec<f64> = (0..PROBE_POINTS).map(|i| lo + step * i as f64).collect();
    let d: Vec<f64> = ts.iter().map(|&t| f.derivative(t)).collect();
    for i in 1..ts.len() {
        let slack = 1e-9 * (1.0 + d[i].abs().max(d[i - 1].abs()));
        if d[i] < d[i - 1] - slack {
            return Err(AnalyticError::NonConvex {
                t: ts[i],
                detail: format!("derivative decreases from {} to {}", d[i - 1], d[i]),
            });
        }
    }
    let v: Vec<f64> = ts.iter().map(|&t| f.value(t)).collect();
    for i in 1..ts.len() - 1 {
        let second = v[i + 1] - 2.0 * v[i] + v[i - 1];
        let slack = 1e-9 * (1.0 + v[i].abs());
        if second < -slack {
            return Err(AnalyticError::NonConvex {
                t: ts[i],
                detail: format!("second difference {second}"),
            });
        }
    }
    Ok(())
}

/// Convex conjugate `sup_t { x t - f(t) }` with the maximiser searched in `bracket`.
///
/// Returns `+inf` when `x` lies outside the range of slopes attained on the bracket.
pub fn legendre<F: ConvexFunction>(f: &F, x: f64, bracket: (f64, f64)) -> Result<f64, AnalyticError> {
    let (lo, hi) = bracket;
    check_convex(f, lo, hi)?;
    let tol = SLOPE_TOL * x.abs().max(1.0);
    let (dlo, dhi) = (f.derivative(lo), f.derivative(hi));
    if x < dlo - tol || x > dhi + tol {
        return Ok(f64::INFINITY);
    }
    let t_star = if dhi - dlo <= tol {
        0f64.clamp(lo, hi)
    } else if x <= dlo {
        lo
    } else if x >= dhi {
        hi
    } else {
        bisect_increasing(|t| f.derivative(t) - x, lo, hi, tol)
    };
    let residual = (f.derivative(t_star) - x).abs();
    if residual > tol {
        return Err(AnalyticError::NoConvergence(format!(
            "|f'(t*) - x| = {residual} at t* = {t_star}, x = {x}"
        )));
    }
    Ok(x * t_star - f.value(t_star))
}

/// Finds `t-` and `t+`, the roots of `rho` on either side of zero.
///
/// Brackets double from `|t| = 1` up to [`T_MAX`]; a side on which `rho` stays
/// negative is reported as `-inf` / `+inf`.
pub fn critical_temperatures(model: &EnvironmentModel) -> Result<(f64, f64), AnalyticError> {
    let rho0 = rho_of_t(model, 0.0);
    if rho0 >= 0.0 {
        return Err(EnvError::NotSupercritical {
            mean_log_offspring: -rho0,
        }
        .into());
    }
    let plus = root_on_side(|t| rho_of_t(model, t))?;
    let minus = root_on_side(|s| rho_of_t(model, -s))?.map(|s| -s);
    Ok((minus.unwrap_or(f64::NEG_INFINITY), plus.unwrap_or(f64::INFINITY)))
}

/// Root in `(0, T_MAX]` of a function negative at 0 and increasing on `[0, inf)`.
fn root_on_side<G: Fn(f64) -> f64>(g: G) -> Result<Option<f64>, AnalyticError> {
    let mut lo = 0.0;
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        if hi >= T_MAX {
            return Ok(None);
        }
        lo = hi;
        hi = (2.0 * hi).min(T_MAX);
    }
    let root = bisect_increasing(&g, lo, hi, 0.0);
    let residual = g(root).abs();
    if residual > RHO_TOL {
        return Err(AnalyticError::NoConvergence(format!("|rho| = {residual} at t = {root}")));
    }
    Ok(Some(root))
}

/// `lambda~(t)`: `lambda` inside `(t-, t+)`, linear with slope `lambda'(t_pm)` outside.
#[derive(Debug, Clone, Copy)]
pub struct FreeEnergyLimit<'a> {
    pub model: &'a EnvironmentModel,
    pub t_minus: f64,
    pub t_plus: f64,
    pub speed_left: f64,
    pub speed_right: f64,
}

impl ConvexFunction for FreeEnergyLimit<'_> {
    fn value(&self, t: f64) -> f64 {
        if t >= self.t_plus {
            t * self.speed_right
        } else if t <= self.t_minus {
            t * self.speed_left
        } else {
            lambda_of_t(self.model, t)
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        if t >= self.t_plus {
            self.speed_right
        } else if t <= self.t_minus {
            self.speed_left
        } else {
            lambda_prime_of_t(self.model, t)
        }
    }
}

/// Tabulated rate-function data for one environment model.
#[derive(Debug, Clone, Serialize)]
pub struct RateFunctionTable {
    pub t_grid: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_prime: Vec<f64>,
    pub rho: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    #[serde(with = "crate::io::extended")]
    pub t_minus: f64,
    #[serde(with = "crate::io::extended")]
    pub t_plus: f64,
    #[serde(with = "crate::io::extended")]
    pub speed_left: f64,
    #[serde(with = "crate::io::extended")]
    pub speed_right: f64,
    /// All states Gaussian or point masses, so `lambda` is an exact quadratic.
    pub closed_form: bool,
    pub mean_log_offspring: f64,
    #[serde(skip)]
    model: EnvironmentModel,
}

impl RateFunctionTable {
    pub fn build(model: &EnvironmentModel, t_grid: &[f64]) -> Result<Self, AnalyticError> {
        let (t_minus, t_plus) = critical_temperatures(model)?;
        let speed_right = if t_plus.is_finite() {
            lambda_prime_of_t(model, t_plus)
        } else {
            model.expectation(|s| s.displacement.tilted_mean_limit(true))
        };
        let speed_left = if t_minus.is_finite() {
            lambda_prime_of_t(model, t_minus)
        } else {
            model.expectation(|s| s.displacement.tilted_mean_limit(false))
        };
        let mut table = Self {
            t_grid: t_grid.to_vec(),
            lambda: Vec::with_capacity(t_grid.len()),
            lambda_prime: Vec::with_capacity(t_grid.len()),
            rho: Vec::with_capacity(t_grid.len()),
            lambda_tilde: Vec::with_capacity(t_grid.len()),
            t_minus,
            t_plus,
            speed_left,
            speed_right,
            closed_form: model.states().iter().all(|s| {
                !matches!(s.displacement, crate::env_model::DisplacementLaw::TwoPoint { .. })
            }),
            mean_log_offspring: model.mean_log_offspring(),
            model: model.clone(),
        };
        for &t in t_grid {
            let l = lambda_of_t(model, t);
            let lp = lambda_prime_of_t(model, t);
            table.lambda.push(l);
            table.lambda_prime.push(lp);
            table.rho.push(t * lp - l);
            table.lambda_tilde.push(table.free_energy_limit().value(t));
        }
        Ok(table)
    }

    pub fn model(&self) -> &EnvironmentModel {
        &self.model
    }

    pub fn lambda_fn(&self) -> QuenchedLogMoment<'_> {
        QuenchedLogMoment { model: &self.model }
    }

    pub fn free_energy_limit(&self) -> FreeEnergyLimit<'_> {
        FreeEnergyLimit {
            model: &self.model,
            t_minus: self.t_minus,
            t_plus: self.t_plus,
            speed_left: self.speed_left,
            speed_right: self.speed_right,
        }
    }

    /// `lambda*(x)`.
    pub fn lambda_star(&self, x: f64) -> Result<f64, AnalyticError> {
        legendre(&self.lambda_fn(), x, (-T_MAX, T_MAX))
    }

    /// `lambda~*(x)`, computed as the conjugate of the free-energy limit.
    pub fn lambda_tilde_star(&self, x: f64) -> Result<f64, AnalyticError> {
        legendre(&self.free_energy_limit(), x, (-T_MAX, T_MAX))
    }
}

/// `lambda~(t)`: linear outside `[t-, t+]`, equal to `lambda` inside.
pub fn free_energy_limit(table: &RateFunctionTable, t: f64) -> f64 {
    table.free_energy_limit().value(t)
}

/// Almost-sure limits of `L_n / n` and `R_n / n`.
pub fn speeds(table: &RateFunctionTable) -> (f64, f64) {
    (table.speed_left, table.speed_right)
}

/// `log E m0(t)`.
#[derive(Debug, Clone, Copy)]
pub struct AnnealedLogMoment<'a> {
    pub model: &'a EnvironmentModel,
}

/// `log E[m0(t) / m0]`.
#[derive(Debug, Clone, Copy)]
pub struct NormalizedAnnealedLogMoment<'a> {
    pub model: &'a EnvironmentModel,
}

fn softmax_weighted<F, G>(model: &EnvironmentModel, log_term: F, inner: G) -> (f64, f64)
where
    F: Fn(&crate::env_model::EnvState) -> f64,
    G: Fn(&crate::env_model::EnvState) -> f64,
{
    let logs: Vec<f64> = model
        .states()
        .iter()
        .zip(model.weights())
        .map(|(s, &w)| if w > 0.0 { w.ln() + log_term(s) } else { f64::NEG_INFINITY })
        .collect();
    let total = log_sum_exp(&logs);
    let mean = model
        .states()
        .iter()
        .zip(&logs)
        .filter(|(_, l)| l.is_finite())
        .map(|(s, l)| (l - total).exp() * inner(s))
        .collect::<CompensatedSum>()
        .value();
    (total, mean)
}

impl ConvexFunction for AnnealedLogMoment<'_> {
    fn value(&self, t: f64) -> f64 {
        softmax_weighted(self.model, |s| s.log_laplace(t), |_| 0.0).0
    }
    fn derivative(&self, t: f64) -> f64 {
        softmax_weighted(self.model, |s| s.log_laplace(t), |s| s.displacement.log_mgf_prime(t)).1
    }
}

impl ConvexFunction for NormalizedAnnealedLogMoment<'_> {
    fn value(&self, t: f64) -> f64 {
        softmax_weighted(self.model, |s| s.displacement.log_mgf(t), |_| 0.0).0
    }
    fn derivative(&self, t: f64) -> f64 {
        softmax_weighted(self.model, |s| s.displacement.log_mgf(t), |s| s.displacement.log_mgf_prime(t)).1
    }
}

/// Annealed log-moment functions and CLT parameters of an i.i.d. environment.
#[derive(Debug, Clone, Serialize)]
pub struct AnnealedParams {
    /// `E[sum L_i] / E m0`.
    pub mu_bar: f64,
    /// `E[sum (L_i - mu_bar)^2] / E m0`.
    pub sigma2_bar: f64,
    /// `E mu_0`.
    pub mu_bar_prime: f64,
    /// `E[(1/m0) sum (L_i - mu_bar')^2]`.
    pub sigma2_bar_prime: f64,
    #[serde(skip)]
    model: EnvironmentModel,
}

impl AnnealedParams {
    pub fn lambda_a(&self, t: f64) -> f64 {
        AnnealedLogMoment { model: &self.model }.value(t)
    }

    pub fn bar_lambda_a(&self, t: f64) -> f64 {
        NormalizedAnnealedLogMoment { model: &self.model }.value(t)
    }

    pub fn lambda_a_fn(&self) -> AnnealedLogMoment<'_> {
        AnnealedLogMoment { model: &self.model }
    }

    pub fn bar_lambda_a_fn(&self) -> NormalizedAnnealedLogMoment<'_> {
        NormalizedAnnealedLogMoment { model: &self.model }
    }
}

pub fn annealed_params(model: &EnvironmentModel) -> Result<AnnealedParams, AnalyticError> {
    if !model.is_iid() {
        return Err(AnalyticError::UnsupportedVariant {
            operation: "annealed parameters",
        });
    }
    let mean_m = model.expectation(|s| s.offspring_mean());
    let mu_bar = model.expectation(|s| s.offspring_mean() * s.displacement.mean()) / mean_m;
    let sigma2_bar = model.expectation(|s| {
        let d = s.displacement.mean() - mu_bar;
        s.offspring_mean() * (s.displacement.variance() + d * d)
    }) / mean_m;
    let mu_bar_prime = model.expectation(|s| s.displacement.mean());
    let sigma2_bar_prime = model.expectation(|s| {
        let d = s.displacement.mean() - mu_bar_prime;
        s.displacement.variance() + d * d
    });
    Ok(AnnealedParams {
        mu_bar,
        sigma2_bar,
        mu_bar_prime,
        sigma2_bar_prime,
        model: model.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{DisplacementLaw, EnvState, OffspringLaw};

    fn state(label: &str, k: u32, d: DisplacementLaw) -> EnvState {
        EnvState::new(label, OffspringLaw::Deterministic { k }, d).unwrap()
    }

    fn cfg_det() -> EnvironmentModel {
        EnvironmentModel::constant(state("s", 2, DisplacementLaw::PointMass { at: 0.0 })).unwrap()
    }

    fn cfg_g() -> EnvironmentModel {
        EnvironmentModel::constant(state("g", 2, DisplacementLaw::Gaussian { mean: 0.0, variance: 1.0 })).unwrap()
    }

    fn cfg_2s() -> EnvironmentModel {
        EnvironmentModel::iid(
            vec![
                state("A", 2, DisplacementLaw::Gaussian { mean: 1.0, variance: 1.0 }),
                state("B", 3, DisplacementLaw::Gaussian { mean: -1.0, variance: 2.0 }),
            ],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    struct Constant(f64);
    impl ConvexFunction for Constant {
        fn value(&self, _: f64) -> f64 {
            self.0
        }
        fn derivative(&self, _: f64) -> f64 {
            0.0
        }
    }

    struct Wavy;
    impl ConvexFunction for Wavy {
        fn value(&self, t: f64) -> f64 {
            t.sin()
        }
        fn derivative(&self, t: f64) -> f64 {
            t.cos()
        }
    }

    #[test]
    fn lambda_examples() {
        let ln2 = 2f64.ln();
        for t in [-3.0, 0.0, 2.5] {
            assert_eq!(lambda_of_t(&cfg_det(), t), ln2);
        }
        assert!((lambda_of_t(&cfg_g(), 1.0) - (ln2 + 0.5)).abs() < 1e-15);
        let m = cfg_2s();
        for t in [-2.0, 0.0, 0.7, 3.0] {
            let oracle = 0.5 * (m.states()[0].log_laplace(t) + m.states()[1].log_laplace(t));
            let closed = 0.5 * 6f64.ln() + 0.75 * t * t;
            assert!((lambda_of_t(&m, t) - oracle).abs() < 1e-14);
            assert!((lambda_of_t(&m, t) - closed).abs() < 1e-13);
        }
        assert!((lambda_of_t(&m, 0.0) - 0.895_879_734_614_027_5).abs() < 1e-15);
    }

    #[test]
    fn legendre_examples() {
        let g = cfg_g();
        let f = QuenchedLogMoment { model: &g };
        let ln2 = 2f64.ln();
        assert!((legendre(&f, 0.0, (-T_MAX, T_MAX)).unwrap() + ln2).abs() < 1e-12);
        assert!((legendre(&f, 1.0, (-T_MAX, T_MAX)).unwrap() - (0.5 - ln2)).abs() < 1e-12);
        let c = Constant(ln2);
        assert!((legendre(&c, 0.0, (-T_MAX, T_MAX)).unwrap() + ln2).abs() < 1e-15);
        assert_eq!(legendre(&c, 0.1, (-T_MAX, T_MAX)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn legendre_rejects_non_convex_input() {
        let err = legendre(&Wavy, 0.0, (-4.0, 4.0)).unwrap_err();
        assert!(matches!(err, AnalyticError::NonConvex { .. }));
    }

    #[test]
    fn critical_temperature_examples() {
        let (m, p) = critical_temperatures(&cfg_g()).unwrap();
        let root = (2.0 * 2f64.ln()).sqrt();
        assert!((p - root).abs() < 1e-12 && (m + root).abs() < 1e-12);
        let (m, p) = critical_temperatures(&cfg_2s()).unwrap();
        let root = (2.0 / 3.0 * 6f64.ln()).sqrt();
        assert!((p - root).abs() < 1e-12 && (m + root).abs() < 1e-12);
        assert_eq!(
            critical_temperatures(&cfg_det()).unwrap(),
            (f64::NEG_INFINITY, f64::INFINITY)
        );
    }

    #[test]
    fn subcritical_model_is_refused() {
        let m = EnvironmentModel::constant(state("one", 1, DisplacementLaw::Gaussian { mean: 0.0, variance: 1.0 })).unwrap();
        assert!(matches!(
            critical_temperatures(&m),
            Err(AnalyticError::Environment(EnvError::NotSupercritical { .. }))
        ));
    }

    #[test]
    fn free_energy_branches() {
        let table = RateFunctionTable::build(&cfg_g(), &[0.0]).unwrap();
        let ln2 = 2f64.ln();
        assert!((free_energy_limit(&table, 0.5) - (ln2 + 0.125)).abs() < 1e-14);
        assert!((free_energy_limit(&table, 2.0) - 2.0 * (2.0 * ln2).sqrt()).abs() < 1e-12);
        let tp = table.t_plus;
        assert!((free_energy_limit(&table, tp) - 2.0 * ln2).abs() < 1e-12);
        assert!((lambda_of_t(&cfg_g(), tp) - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn speeds_examples() {
        let (l, r) = speeds(&RateFunctionTable::build(&cfg_g(), &[]).unwrap());
        let v = (2.0 * 2f64.ln()).sqrt();
        assert!((r - v).abs() < 1e-12 && (l + v).abs() < 1e-12);
        let (l, r) = speeds(&RateFunctionTable::build(&cfg_2s(), &[]).unwrap());
        let v = 1.5 * (2.0 / 3.0 * 6f64.ln()).sqrt();
        assert!((r - v).abs() < 1e-12 && (l + v).abs() < 1e-12);

        let tp = EnvironmentModel::constant(state("tp", 2, DisplacementLaw::TwoPoint { d: 1.0, p: 0.5 })).unwrap();
        let (l, r) = speeds(&RateFunctionTable::build(&tp, &[]).unwrap());
        assert!(r.abs() <= 1.0 && l.abs() <= 1.0);
        assert_eq!(l, -r);
    }

    #[test]
    fn annealed_examples() {
        let p = annealed_params(&cfg_2s()).unwrap();
        assert!((p.mu_bar + 0.2).abs() < 1e-14);
        assert!((p.sigma2_bar - 2.56).abs() < 1e-14);
        assert!(p.mu_bar_prime.abs() < 1e-15);
        assert!((p.sigma2_bar_prime - 2.5).abs() < 1e-14);
        assert!(p.bar_lambda_a(0.0).abs() < 1e-15);

        let g = annealed_params(&cfg_g()).unwrap();
        assert_eq!((g.mu_bar, g.sigma2_bar), (0.0, 1.0));

        let markov = EnvironmentModel::markov(cfg_2s().states().to_vec(), vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        assert!(matches!(
            annealed_params(&markov),
            Err(AnalyticError::UnsupportedVariant { .. })
        ));
    }

    #[test]
    fn annealed_dominates_quenched() {
        let m = cfg_2s();
        let p = annealed_params(&m).unwrap();
        let mut strict = false;
        for i in -40..=40 {
            let t = i as f64 * 0.1;
            let (a, q) = (p.lambda_a(t), lambda_of_t(&m, t));
            assert!(a >= q - 1e-14);
            strict |= a > q + 1e-9;
        }
        assert!(strict);
    }
}
