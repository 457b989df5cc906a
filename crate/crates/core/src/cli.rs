//! Command-line front end: `rates`, `simulate`, `estimate`, `verify`, `report`.
//!
//! Exit codes: 0 success, 1 a verification check failed or errored,
//! 2 malformed configuration or arguments (nothing is written),
//! 3 population overflow, 4 I/O or other runtime failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytic::{annealed_params, AnnealedParams, RateFunctionTable};
use crate::config::RunConfig;
use crate::env_model::{quenched_moments, sample_environment, EnvRealization};
use crate::estimators::{
    clt_cdf_sorted, default_llt_grid, fejer_smooth_positions, ks_distance, ldp_rates_sorted, llt_gap_sorted, normal_reference,
    smoothing_grid_between, trapezoid, EstimatorError, SortedPositions,
};
use crate::io::{extended, read_positions, write_csv_file, write_json_file, write_positions, SCHEMA_VERSION};
use crate::numeric::linspace_step;
use crate::simulate::{partition_function, snapshot_header, snapshot_rows, SimError, TreeGrowth};
use crate::verify::{run_suite, SuiteReport};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "BRWRE_OUT_DIR";

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OVERFLOW: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Trees above this size are not smoothed by `estimate`.
const SMOOTH_MAX_PARTICLES: usize = 1 << 17;

#[derive(Debug, Parser)]
#[command(name = "brwre", version, about = "Branching random walk in a random environment")]
pub struct Cli {
    /// Worker threads for replica and particle parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate lambda, lambda', rho and the free-energy limit on a t grid.
    Rates(RatesArgs),
    /// Grow trees and write snapshots and position dumps.
    Simulate(SimulateArgs),
    /// Run the estimators over a stored simulation.
    Estimate(EstimateArgs),
    /// Run the verification suite.
    Verify(VerifyArgs),
    /// Render a stored verification report as text.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory (overrides BRWRE_OUT_DIR and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RatesArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    pub t_min: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub t_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub t_step: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Horizon (overrides `simulation.horizon`).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Give every replica its own environment path instead of one shared path.
    #[arg(long)]
    pub fresh_environments: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Directory holding `simulate.json` (default: the output directory).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Generation to analyse (default: the last one).
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A `verify.json` file (default: `verify.json` in the output directory).
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Overflow(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Overflow(_) => EXIT_OVERFLOW,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Overflow(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::PopulationOverflow { .. } => Failure::Overflow(e.to_string()),
            SimError::InvalidConfig(_) | SimError::HorizonTooShort { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_CONFIG;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match &cli.command {
        Command::Rates(a) => rates(a),
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Verify(a) => verify(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

/// `--out`, then `BRWRE_OUT_DIR`, then the config, then `out`.
fn output_dir(flag: &OutArg, cfg: Option<&RunConfig>) -> PathBuf {
    flag.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Serialize)]
struct RatesSidecar<'a> {
    schema_version: u32,
    config_id: &'a str,
    t_min: f64,
    t_max: f64,
    t_step: f64,
    rows: usize,
    #[serde(with = "extended")]
    t_minus: f64,
    #[serde(with = "extended")]
    t_plus: f64,
    #[serde(with = "extended")]
    speed_left: f64,
    #[serde(with = "extended")]
    speed_right: f64,
    mean_log_offspring: f64,
    closed_form: bool,
    annealed: Option<AnnealedParams>,
}

fn rates(args: &RatesArgs) -> Result<i32, Failure> {
    let cfg = load_config(&args.config)?;
    if !(args.t_step > 0.0 && args.t_min <= args.t_max && args.t_min.is_finite() && args.t_max.is_finite()) {
        return Err(Failure::Config("need finite --t-min <= --t-max and --t-step > 0".into()));
    }
    let model = cfg.model().map_err(Failure::Config)?;
    let grid = linspace_step(args.t_min, args.t_max, args.t_step);
    let table = RateFunctionTable::build(&model, &grid).map_err(|e| Failure::Config(e.to_string()))?;
    let annealed = if model.is_iid() { annealed_params(&model).ok() } else { None };

    let dir = output_dir(&args.out, Some(&cfg));
    create_dir(&dir)?;
    let header: Vec<String> = ["t", "lambda", "lambda_prime", "rho", "lambda_tilde"].map(String::from).to_vec();
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| vec![grid[i], table.lambda[i], table.lambda_prime[i], table.rho[i], table.lambda_tilde[i]])
        .collect();
    write_csv_file(&dir.join("rates.csv"), &header, &rows)?;
    let sidecar = RatesSidecar {
        schema_version: SCHEMA_VERSION,
        config_id: &cfg.id,
        t_min: args.t_min,
        t_max: args.t_max,
        t_step: args.t_step,
        rows: rows.len(),
        t_minus: table.t_minus,
        t_plus: table.t_plus,
        speed_left: table.speed_left,
        speed_right: table.speed_right,
        mean_log_offspring: table.mean_log_offspring,
        closed_form: table.closed_form,
        annealed,
    };
    write_json_file(&dir.join("rates.json"), &sidecar)?;
    println!(
        "{} rows; t- = {:.6}, t+ = {:.6}; written to {}",
        rows.len(),
        table.t_minus,
        table.t_plus,
        dir.display()
    );
    Ok(0)
}

/// Sidecar of `simulate`, also the input of `estimate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub horizon: usize,
    pub cap: usize,
    pub t_grid: Vec<f64>,
    pub fresh_environments: bool,
    pub replicas: Vec<ReplicaRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica_id: u64,
    pub environment_stream: u64,
    /// State labels along the environment path.
    pub environment: Vec<String>,
    pub snapshots: String,
    pub positions: String,
    pub final_count: u64,
}

fn environment_labels(env: &EnvRealization) -> Vec<String> {
    env.states().map(|s| s.label.clone()).collect()
}

fn simulate(args: &SimulateArgs) -> Result<i32, Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(n) = args.n {
        cfg.simulation.horizon = n;
    }
    if let Some(r) = args.replicas {
        cfg.simulation.replicas = r;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    cfg.validate(&args.config.display().to_string()).map_err(|e| Failure::Config(e.to_string()))?;
    let seed = cfg
        .seed
        .ok_or_else(|| Failure::Config("no seed: set `seed` in the config or pass --seed".into()))?;
    let model = cfg.model().map_err(Failure::Config)?;
    let sim = cfg.sim_config(seed);
    sim.validate()?;

    let dir = output_dir(&args.out, Some(&cfg));
    create_dir(&dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let mut records = Vec::new();
    let shared = sample_environment(&model, sim.horizon, seed, 0).map_err(|e| Failure::Runtime(e.to_string()))?;
    for r in 0..sim.replicas as u64 {
        let fresh;
        let env = if args.fresh_environments {
            fresh = sample_environment(&model, sim.horizon, seed, r + 1).map_err(|e| Failure::Runtime(e.to_string()))?;
            &fresh
        } else {
            &shared
        };
        let snapshots_name = format!("snapshots_r{r}.csv");
        let positions_name = format!("positions_r{r}.bin");
        match simulate_replica(env, &sim, r, &dir.join(&positions_name), &mut written) {
            Ok(snapshots) => {
                let path = dir.join(&snapshots_name);
                written.push(path.clone());
                write_csv_file(&path, &snapshot_header(&sim.t_grid), &snapshot_rows(&snapshots))?;
                records.push(ReplicaRecord {
                    replica_id: r,
                    environment_stream: env.stream_id,
                    environment: environment_labels(env),
                    snapshots: snapshots_name,
                    positions: positions_name,
                    final_count: snapshots.last().map_or(1, |s| s.count),
                });
            }
            Err(f) => {
                // partial output from an overflowed run is misleading
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(f);
            }
        }
    }
    let record = SimulationRecord {
        schema_version: SCHEMA_VERSION,
        horizon: sim.horizon,
        cap: sim.cap,
        t_grid: sim.t_grid.clone(),
        seed,
        fresh_environments: args.fresh_environments,
        replicas: records,
        config: cfg,
    };
    write_json_file(&dir.join("simulate.json"), &record)?;
    for rec in &record.replicas {
        println!("replica {}: {} particles at n = {}", rec.replica_id, rec.final_count, record.horizon);
    }
    Ok(0)
}

/// Grows one tree, streaming generations `0..=horizon` into the positions dump.
fn simulate_replica(
    env: &EnvRealization,
    sim: &crate::simulate::SimConfig,
    replica: u64,
    positions_path: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<Vec<crate::simulate::GenerationSnapshot>, Failure> {
    let file = File::create(positions_path)?;
    written.push(positions_path.to_path_buf());
    let mut out = BufWriter::new(file);
    let mut growth = TreeGrowth::new(env, sim, replica)?;
    let mut snapshots = Vec::with_capacity(sim.horizon + 1);
    write_positions(&mut out, growth.positions())?;
    while let Some(snapshot) = growth.next() {
        let snapshot = snapshot?;
        if snapshot.n > 0 {
            write_positions(&mut out, growth.positions())?;
        }
        snapshots.push(snapshot);
    }
    out.flush()?;
    Ok(snapshots)
}

#[derive(Debug, Serialize)]
struct EstimateSidecar {
    schema_version: u32,
    config_id: String,
    seed: u64,
    n: usize,
    x_grid_ldp: Vec<f64>,
    h: f64,
    bandwidth: f64,
    replicas: Vec<ReplicaEstimate>,
}

#[derive(Debug, Serialize)]
struct ReplicaEstimate {
    replica_id: u64,
    environment_stream: u64,
    count: u64,
    r_n: f64,
    l_n: f64,
    a_n: f64,
    b_n: f64,
    /// `(t, (1/n) log Z~_n(t))` on the simulation t grid.
    #[serde(with = "extended::vec")]
    free_energy: Vec<f64>,
    #[serde(with = "extended::vec")]
    ldp_upper: Vec<f64>,
    #[serde(with = "extended::vec")]
    ldp_lower: Vec<f64>,
    #[serde(with = "extended")]
    clt_ks: f64,
    llt_sup_gap: Option<f64>,
    smoothed_mass: Option<f64>,
    /// Why an estimator was not evaluated.
    notes: Vec<String>,
}

fn estimate(args: &EstimateArgs) -> Result<i32, Failure> {
    let input = args.input.clone().unwrap_or_else(|| output_dir(&args.out, None));
    let sidecar = input.join("simulate.json");
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Failure::Config(format!("cannot read {}: {e}", sidecar.display())))?;
    let record: SimulationRecord =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", sidecar.display())))?;
    let cfg = &record.config;
    cfg.validate(&sidecar.display().to_string()).map_err(|e| Failure::Config(e.to_string()))?;
    let n = args.n.unwrap_or(record.horizon);
    if n == 0 || n > record.horizon {
        return Err(Failure::Config(format!("--n must lie in 1..={}", record.horizon)));
    }
    let model = cfg.model().map_err(Failure::Config)?;
    let est = &cfg.estimators;
    let clt_grid = est.clt_grid();
    let reference = normal_reference(&clt_grid);

    let mut ldp_rows = Vec::new();
    let mut clt_columns = Vec::new();
    let mut llt_rows = Vec::new();
    let mut smooth_rows = Vec::new();
    let mut replicas = Vec::new();
    for rec in &record.replicas {
        let env = sample_environment(&model, record.horizon, record.seed, rec.environment_stream)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        if environment_labels(&env) != rec.environment {
            return Err(Failure::Config(format!(
                "replica {}: the environment regenerated from the seed differs from the stored one",
                rec.replica_id
            )));
        }
        let moments = quenched_moments(&env, &[]).map_err(|e| Failure::Runtime(e.to_string()))?;
        let dump = std::fs::read(input.join(&rec.positions))?;
        let generations = read_positions(dump.as_slice())?;
        let positions = generations
            .get(n)
            .ok_or_else(|| Failure::Runtime(format!("{} holds only {} generations", rec.positions, generations.len())))?;
        let log_p = moments.log_p(n);
        let sorted = SortedPositions::new(positions.clone());
        let (r_n, l_n) = (
            sorted.as_slice().last().copied().unwrap_or(f64::NAN),
            sorted.as_slice().first().copied().unwrap_or(f64::NAN),
        );
        let free_energy = record
            .t_grid
            .iter()
            .map(|&t| partition_function(positions, t).map(|z| z / n as f64))
            .collect::<Result<Vec<_>, _>>()?;

        let ldp = ldp_rates_sorted(&sorted, n, &est.ldp_x);
        for (j, &x) in est.ldp_x.iter().enumerate() {
            ldp_rows.push(vec![
                rec.replica_id as f64,
                x,
                ldp.upper_counts[j] as f64,
                ldp.lower_counts[j] as f64,
                ldp.upper[j],
                ldp.lower[j],
            ]);
        }

        let mut notes = Vec::new();
        let (a_n, b_n) = moments.normalizers(n).unwrap_or((moments.a(n), 0.0));
        let clt_ks = match clt_cdf_sorted(&sorted, &moments, n, &clt_grid) {
            Ok(cdf) => {
                let ks = ks_distance(&cdf, &reference).expect("same grid");
                clt_columns.push(cdf);
                ks
            }
            Err(e) => {
                notes.push(format!("clt: {e}"));
                clt_columns.push(vec![f64::NAN; clt_grid.len()]);
                f64::NAN
            }
        };
        let llt_sup_gap = match llt_gap_sorted(&sorted, &moments, n, est.h, &default_llt_grid(a_n, b_n)) {
            Ok(gap) => {
                for k in 0..gap.x_grid.len() {
                    llt_rows.push(vec![rec.replica_id as f64, gap.x_grid[k], gap.window_mass[k], gap.expected[k], gap.gap[k]]);
                }
                Some(gap.sup_gap)
            }
            Err(e @ (EstimatorError::Lattice | EstimatorError::Environment(_))) => {
                notes.push(format!("llt: {e}"));
                None
            }
            Err(e) => return Err(Failure::Runtime(e.to_string())),
        };
        let smoothed_mass = if positions.len() <= SMOOTH_MAX_PARTICLES {
            let grid = smoothing_grid_between(l_n, r_n, est.bandwidth);
            let density = fejer_smooth_positions(positions, log_p, est.bandwidth, &grid).map_err(|e| Failure::Runtime(e.to_string()))?;
            for (x, d) in grid.iter().zip(&density) {
                smooth_rows.push(vec![rec.replica_id as f64, *x, *d]);
            }
            Some(trapezoid(&grid, &density))
        } else {
            notes.push(format!("smoothing: {} particles exceed {SMOOTH_MAX_PARTICLES}", positions.len()));
            None
        };
        replicas.push(ReplicaEstimate {
            replica_id: rec.replica_id,
            environment_stream: rec.environment_stream,
            count: positions.len() as u64,
            r_n,
            l_n,
            a_n,
            b_n,
            free_energy,
            ldp_upper: ldp.upper.clone(),
            ldp_lower: ldp.lower.clone(),
            clt_ks,
            llt_sup_gap,
            smoothed_mass,
            notes,
        });
    }

    let dir = args.out.out.clone().unwrap_or_else(|| input.clone());
    create_dir(&dir)?;
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    write_csv_file(
        &dir.join(format!("estimate_ldp_n{n}.csv")),
        &s(&["replica", "x", "upper_count", "lower_count", "upper_rate", "lower_rate"]),
        &ldp_rows,
    )?;
    let mut clt_header = s(&["x", "phi"]);
    clt_header.extend(record.replicas.iter().map(|r| format!("replica_{}", r.replica_id)));
    let clt_rows: Vec<Vec<f64>> = (0..clt_grid.len())
        .map(|k| {
            let mut row = vec![clt_grid[k], reference[k]];
            row.extend(clt_columns.iter().map(|c| c[k]));
            row
        })
        .collect();
    write_csv_file(&dir.join(format!("estimate_clt_n{n}.csv")), &clt_header, &clt_rows)?;
    write_csv_file(
        &dir.join(format!("estimate_llt_n{n}.csv")),
        &s(&["replica", "x", "window_mass", "expected", "gap"]),
        &llt_rows,
    )?;
    write_csv_file(&dir.join(format!("estimate_smooth_n{n}.csv")), &s(&["replica", "x", "density"]), &smooth_rows)?;
    let out = EstimateSidecar {
        schema_version: SCHEMA_VERSION,
        config_id: cfg.id.clone(),
        seed: record.seed,
        n,
        x_grid_ldp: est.ldp_x.clone(),
        h: est.h,
        bandwidth: est.bandwidth,
        replicas,
    };
    write_json_file(&dir.join(format!("estimate_n{n}.json")), &out)?;
    for r in &out.replicas {
        println!(
            "replica {}: n = {n}, {} particles, KS = {}, LLT sup-gap = {}",
            r.replica_id,
            r.count,
            crate::io::fmt_ext(r.clt_ks),
            r.llt_sup_gap.map_or("n/a".to_string(), |g| format!("{g:.6}"))
        );
    }
    Ok(0)
}

fn verify(args: &VerifyArgs) -> Result<i32, Failure> {
    let cfg = load_config(&args.config)?;
    let seed = args
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Failure::Config("verify needs a seed: set `seed` in the config or pass --seed".into()))?;
    let suite = cfg.suite_config(seed).map_err(Failure::Config)?;
    let report = run_suite(&suite);
    let dir = output_dir(&args.out, Some(&cfg));
    create_dir(&dir)?;
    write_json_file(&dir.join("verify.json"), &report)?;
    let text = report.to_text();
    std::fs::write(dir.join("verify.txt"), &text)?;
    print!("{text}");
    Ok(if report.exit_code() == 0 { 0 } else { EXIT_CHECK_FAILED })
}

fn report(args: &ReportArgs) -> Result<i32, Failure> {
    let path = args
        .input
        .clone()
        .unwrap_or_else(|| output_dir(&OutArg { out: None }, None).join("verify.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let report: SuiteReport = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    print!("{}", report.to_text());
    Ok(if report.exit_code() == 0 { 0 } else { EXIT_CHECK_FAILED })
}
