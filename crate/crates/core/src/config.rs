//! Run configuration read from TOML.
//!
//! ```toml
//! id = "cfg_g"
//! seed = 42
//!
//! [[states]]
//! label = "g"
//! offspring = { law = "deterministic", k = 2 }
//! displacement = { law = "gaussian", mean = 0.0, variance = 1.0 }
//!
//! [environment]
//! kind = "constant"          # or "iid" with `probs`, or "markov" with `transition`
//!
//! [simulation]
//! horizon = 20
//! replicas = 2
//! t_grid = [0.5, 1.0]
//!
//! [estimators]
//! ldp_x = [0.0, 0.8]
//!
//! [suite]
//! horizon = 20
//! ```
//!
//! Every table except `states` and `environment` is optional. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env_model::{EnvState, EnvironmentKind, EnvironmentModel};
use crate::numeric::linspace_step;
use crate::simulate::{SimConfig, DEFAULT_CAP};
use crate::verify::{SuiteConfig, SuiteParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: field `{field}`: {message}")]
    Field { path: String, field: String, message: String },
}

impl ConfigError {
    fn field(path: &str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Field {
            path: path.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Temperatures at which `log Z~_n(t)` and `W_n(t)` are recorded.
    #[serde(default)]
    pub t_grid: Vec<f64>,
}

fn default_horizon() -> usize {
    20
}

fn default_replicas() -> usize {
    1
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            replicas: default_replicas(),
            cap: default_cap(),
            t_grid: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    /// Points `x` for `(1/n) log Z_n[nx, inf)` and `(1/n) log Z_n(-inf, nx]`.
    pub ldp_x: Vec<f64>,
    /// Standardized grid for the normalized CDF: `[min, max]` with `step`.
    pub clt_min: f64,
    pub clt_max: f64,
    pub clt_step: f64,
    /// Window width of the local comparison.
    pub h: f64,
    /// Fejér bandwidth.
    pub bandwidth: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            ldp_x: vec![0.0, 0.8],
            clt_min: -4.0,
            clt_max: 4.0,
            clt_step: 0.01,
            h: 0.5,
            bandwidth: 0.5,
        }
    }
}

impl EstimatorSection {
    pub fn clt_grid(&self) -> Vec<f64> {
        linspace_step(self.clt_min, self.clt_max, self.clt_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub states: Vec<EnvState>,
    pub environment: EnvironmentKind,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub estimators: EstimatorSection,
    #[serde(default)]
    pub suite: SuiteParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self, origin: &str) -> Result<(), ConfigError> {
        let err = |field: &str, msg: String| ConfigError::field(origin, field, msg);
        if self.id.trim().is_empty() {
            return Err(err("id", "must not be empty".into()));
        }
        if self.states.is_empty() {
            return Err(err("states", "at least one state is required".into()));
        }
        for (i, s) in self.states.iter().enumerate() {
            s.validate().map_err(|e| err(&format!("states[{i}]"), e.to_string()))?;
        }
        self.model().map_err(|e| err("environment", e))?;
        let sim = &self.simulation;
        if sim.horizon == 0 {
            return Err(err("simulation.horizon", "must be >= 1".into()));
        }
        if sim.replicas == 0 {
            return Err(err("simulation.replicas", "must be >= 1".into()));
        }
        if sim.cap == 0 {
            return Err(err("simulation.cap", "must be >= 1".into()));
        }
        if sim.t_grid.iter().any(|t| !t.is_finite()) {
            return Err(err("simulation.t_grid", "values must be finite".into()));
        }
        let est = &self.estimators;
        if est.ldp_x.iter().any(|x| !x.is_finite()) {
            return Err(err("estimators.ldp_x", "values must be finite".into()));
        }
        if !(est.clt_step > 0.0 && est.clt_min < est.clt_max) {
            return Err(err("estimators.clt_step", "need clt_step > 0 and clt_min < clt_max".into()));
        }
        if est.h.is_nan() || est.h <= 0.0 {
            return Err(err("estimators.h", "must be positive".into()));
        }
        if est.bandwidth.is_nan() || est.bandwidth <= 0.0 {
            return Err(err("estimators.bandwidth", "must be positive".into()));
        }
        self.suite.validate().map_err(|e| err("suite", e))?;
        Ok(())
    }

    /// The environment law; also checks supercriticality.
    pub fn model(&self) -> Result<Arc<EnvironmentModel>, String> {
        let model = EnvironmentModel::from_kind(self.states.clone(), self.environment.clone()).map_err(|e| e.to_string())?;
        model.check_supercritical().map_err(|e| e.to_string())?;
        Ok(Arc::new(model))
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            horizon: self.simulation.horizon,
            cap: self.simulation.cap,
            t_grid: self.simulation.t_grid.clone(),
            replicas: self.simulation.replicas,
            master_seed: seed,
        }
    }

    pub fn suite_config(&self, seed: u64) -> Result<SuiteConfig, String> {
        Ok(SuiteConfig {
            config_id: self.id.clone(),
            model: self.model()?,
            seed,
            params: self.suite.clone(),
        })
    }
}
