//! Browser bindings: a two-state i.i.d. environment with Gaussian steps,
//! its rate functions, one simulated tree and the CLT comparison for it.
//!
//! Every export returns a JSON string so the page needs no glue beyond
//! `JSON.parse`. Seeds are `u32` on the JS side to stay clear of `BigInt`.

use std::sync::Arc;

use brwre::analytic::{ConvexFunction, RateFunctionTable};
use brwre::env_model::{quenched_moments, sample_environment, DisplacementLaw, EnvState, EnvironmentModel, OffspringLaw};
use brwre::estimators::{clt_cdf_sorted, ks_distance, normal_reference, SortedPositions};
use brwre::numeric::linspace_step;
use brwre::simulate::{run_tree_final, SimConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest population the page will grow.
const DEMO_CAP: usize = 1 << 21;
const HISTOGRAM_BINS: usize = 60;

/// Letter A with probability `p_a`, otherwise letter B. Each letter has a
/// deterministic number of children and Gaussian steps.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct TwoStateModel {
    model: Arc<EnvironmentModel>,
}

#[wasm_bindgen]
impl TwoStateModel {
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p_a: f64,
        children_a: u32,
        mean_a: f64,
        variance_a: f64,
        children_b: u32,
        mean_b: f64,
        variance_b: f64,
    ) -> Result<TwoStateModel, JsError> {
        let model = two_state_model(p_a, (children_a, mean_a, variance_a), (children_b, mean_b, variance_b)).map_err(to_js)?;
        Ok(Self { model })
    }

    /// `lambda`, the free-energy limit and the critical temperatures on `[t_min, t_max]`.
    pub fn rates(&self, t_min: f64, t_max: f64, points: usize) -> Result<String, JsError> {
        json(&rates(&self.model, t_min, t_max, points).map_err(to_js)?)
    }

    /// Grows one tree to generation `n` and summarizes every generation.
    pub fn simulate(&self, n: usize, seed: u32) -> Result<String, JsError> {
        json(&simulate(&self.model, n, seed.into()).map_err(to_js)?)
    }

    /// Normalized CDF of one tree at generation `n` against the standard normal.
    pub fn clt(&self, n: usize, seed: u32) -> Result<String, JsError> {
        json(&clt(&self.model, n, seed.into()).map_err(to_js)?)
    }
}

/// Letters given as `(children, step mean, step variance)`; `p_a >= 1` means a constant environment.
pub fn two_state_model(p_a: f64, a: (u32, f64, f64), b: (u32, f64, f64)) -> Result<Arc<EnvironmentModel>, String> {
    let state = |label: &str, (k, mean, variance): (u32, f64, f64)| {
        EnvState::new(label, OffspringLaw::Deterministic { k }, DisplacementLaw::Gaussian { mean, variance }).map_err(|e| e.to_string())
    };
    let (a, b) = (state("A", a)?, state("B", b)?);
    let model = if p_a >= 1.0 {
        EnvironmentModel::constant(a)
    } else {
        EnvironmentModel::iid(vec![a, b], vec![p_a, 1.0 - p_a])
    }
    .map_err(|e| e.to_string())?;
    model.check_supercritical().map_err(|e| e.to_string())?;
    Ok(Arc::new(model))
}

fn to_js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(to_js)
}

#[derive(Debug, Serialize)]
pub struct Rates {
    pub t: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    pub t_minus: Option<f64>,
    pub t_plus: Option<f64>,
    pub speed_left: Option<f64>,
    pub speed_right: Option<f64>,
}

/// JSON has no infinities; a critical temperature that does not exist becomes `null`.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn rates(model: &EnvironmentModel, t_min: f64, t_max: f64, points: usize) -> Result<Rates, String> {
    if !(t_min < t_max && (2..=10_000).contains(&points)) {
        return Err("need t_min < t_max and 2..=10000 points".into());
    }
    let step = (t_max - t_min) / (points - 1) as f64;
    let t = linspace_step(t_min, t_max, step);
    let table = RateFunctionTable::build(model, &t).map_err(|e| e.to_string())?;
    let limit = table.free_energy_limit();
    Ok(Rates {
        lambda_tilde: t.iter().map(|&s| limit.value(s)).collect(),
        lambda: table.lambda.clone(),
        t,
        t_minus: finite(table.t_minus),
        t_plus: finite(table.t_plus),
        speed_left: finite(table.speed_left),
        speed_right: finite(table.speed_right),
    })
}

#[derive(Debug, Serialize)]
pub struct Generation {
    pub n: usize,
    pub count: u64,
    pub r_n: f64,
    pub l_n: f64,
    pub w_n: f64,
}

#[derive(Debug, Serialize)]
pub struct Tree {
    pub environment: String,
    pub generations: Vec<Generation>,
    /// Left edges of the histogram bins, plus the final right edge.
    pub bin_edges: Vec<f64>,
    /// Fraction of the final generation in each bin.
    pub histogram: Vec<f64>,
}

fn grow(model: &Arc<EnvironmentModel>, n: usize, seed: u64) -> Result<(String, Vec<brwre::simulate::GenerationSnapshot>, Vec<f64>), String> {
    let env = sample_environment(model, n.max(1), seed, 0).map_err(|e| e.to_string())?;
    let config = SimConfig {
        horizon: n,
        cap: DEMO_CAP,
        t_grid: vec![],
        replicas: 1,
        master_seed: seed,
    };
    let (snaps, positions) = run_tree_final(&env, &config, 0).map_err(|e| e.to_string())?;
    let labels = env.states().take(n).map(|s| s.label.as_str()).collect();
    Ok((labels, snaps, positions))
}

pub fn simulate(model: &Arc<EnvironmentModel>, n: usize, seed: u64) -> Result<Tree, String> {
    let (environment, snaps, positions) = grow(model, n, seed)?;
    let (lo, hi) = (snaps.last().expect("generation 0").l_n, snaps.last().expect("generation 0").r_n);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut histogram = vec![0.0; HISTOGRAM_BINS];
    let weight = 1.0 / positions.len() as f64;
    for x in &positions {
        let bin = (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += weight;
    }
    Ok(Tree {
        environment,
        generations: snaps
            .iter()
            .map(|s| Generation {
                n: s.n,
                count: s.count,
                r_n: s.r_n,
                l_n: s.l_n,
                w_n: s.w_n,
            })
            .collect(),
        bin_edges: (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect(),
        histogram,
    })
}

#[derive(Debug, Serialize)]
pub struct CltView {
    pub n: usize,
    pub count: u64,
    pub a_n: f64,
    pub b_n: f64,
    pub x: Vec<f64>,
    pub empirical: Vec<f64>,
    pub normal: Vec<f64>,
    pub ks: f64,
}

pub fn clt(model: &Arc<EnvironmentModel>, n: usize, seed: u64) -> Result<CltView, String> {
    if n == 0 {
        return Err("n must be at least 1".into());
    }
    let env = sample_environment(model, n, seed, 0).map_err(|e| e.to_string())?;
    let (_, snaps, positions) = grow(model, n, seed)?;
    let moments = quenched_moments(&env, &[]).map_err(|e| e.to_string())?;
    let (a_n, b_n) = moments.normalizers(n).map_err(|e| e.to_string())?;
    let x = linspace_step(-4.0, 4.0, 0.05);
    let sorted = SortedPositions::new(positions);
    let empirical = clt_cdf_sorted(&sorted, &moments, n, &x).map_err(|e| e.to_string())?;
    let normal = normal_reference(&x);
    let ks = ks_distance(&empirical, &normal).map_err(|e| e.to_string())?;
    Ok(CltView {
        n,
        count: snaps[n].count,
        a_n,
        b_n,
        x,
        empirical,
        normal,
        ks,
    })
}
