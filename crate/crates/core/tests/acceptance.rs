//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line on stdout
//! (written past the test harness capture) and then asserts.
//!
//! Run with `cargo test -p brwre --test acceptance -- --test-threads 1` for
//! ordered output.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use brwre::analytic::{annealed_params, legendre, lambda_of_t, lambda_prime_of_t, ConvexFunction, RateFunctionTable};
use brwre::config::RunConfig;
use brwre::env_model::{quenched_moments, sample_environment, EnvRealization, EnvironmentModel, QuenchedMoments};
use brwre::estimators::{
    aggregate, clt_cdf_sorted, default_llt_grid, ks_distance, llt_gap_sorted, normal_reference, quenched_mean_ldp_exact,
    summarize_replica, AggregateMode, ReplicaSummary, SortedPositions, SummaryPlan,
};
use brwre::numeric::{linspace_step, mean_and_se, median, INV_SQRT_2PI};
use brwre::simulate::{run_tree, run_tree_final, SimConfig, SimError, DEFAULT_CAP};

const SEED: u64 = 42;
const SPEED_G: f64 = 1.177410;
const T_VALUES: [f64; 4] = [0.0, 0.5, 1.0, 3.0];

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    RunConfig::load(&path).unwrap()
}

fn model(name: &str) -> Arc<EnvironmentModel> {
    config(name).model().unwrap()
}

fn verdict(criterion: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion:>2} {:<4} {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn standard_grid() -> Vec<f64> {
    linspace_step(-4.0, 4.0, 0.01)
}

fn sim(horizon: usize, t_grid: &[f64]) -> SimConfig {
    SimConfig {
        horizon,
        cap: DEFAULT_CAP,
        t_grid: t_grid.to_vec(),
        replicas: 1,
        master_seed: SEED,
    }
}

struct GaussianBatch {
    summaries: Vec<ReplicaSummary>,
    elapsed: Duration,
}

/// CFG-G: 16 trees to n = 20 in the seed-42 environment.
fn gaussian_batch() -> &'static GaussianBatch {
    static BATCH: OnceLock<GaussianBatch> = OnceLock::new();
    BATCH.get_or_init(|| {
        let start = Instant::now();
        let model = model("cfg_g.toml");
        let env = sample_environment(&model, 20, SEED, 0).unwrap();
        let moments = quenched_moments(&env, &T_VALUES).unwrap();
        let plan = SummaryPlan {
            track: vec![10, 15, 20],
            ldp_x: vec![0.8],
            clt_x: vec![],
            llt_h: None,
            fixed_normalizers: vec![],
        };
        let config = sim(20, &T_VALUES);
        let summaries = (0..16)
            .map(|r| summarize_replica(&env, &moments, &config, r, &plan).unwrap())
            .collect();
        GaussianBatch {
            summaries,
            elapsed: start.elapsed(),
        }
    })
}

/// Positions of one tree at its horizon, sorted, with the environment moments.
fn single_tree(env: &EnvRealization, n: usize) -> Result<(SortedPositions, QuenchedMoments, Duration), SimError> {
    let start = Instant::now();
    let (_, positions) = run_tree_final(env, &sim(n, &[]), 0)?;
    let moments = quenched_moments(env, &[]).unwrap();
    Ok((SortedPositions::new(positions), moments, start.elapsed()))
}

#[test]
fn criterion_01_legendre_matches_brute_force() {
    let start = Instant::now();
    let ts = linspace_step(-8.0, 8.0, 1e-4);
    let mut worst = 0.0f64;
    for name in ["cfg_g.toml", "cfg_2s.toml"] {
        let model = model(name);
        let table = RateFunctionTable::build(&model, &[]).unwrap();
        let f = table.lambda_fn();
        let lambda: Vec<f64> = ts.iter().map(|&t| lambda_of_t(&model, t)).collect();
        // 50 points strictly inside the slopes attained on [-8, 8]
        let (lo, hi) = (f.derivative(-8.0), f.derivative(8.0));
        for k in 0..50 {
            let x = lo + (hi - lo) * (k as f64 + 0.5) / 50.0 * 0.98 + (hi - lo) * 0.01;
            let brute = ts.iter().zip(&lambda).map(|(t, l)| t * x - l).fold(f64::NEG_INFINITY, f64::max);
            let exact = legendre(&f, x, (-8.0, 8.0)).unwrap();
            worst = worst.max((exact - brute).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "Legendre transform against dense-grid brute force",
        pass,
        &format!("max |diff| = {worst:.3e} (tol 1e-6), {:.2} s (limit 5 s)", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_02_critical_temperatures_and_speeds() {
    let g = RateFunctionTable::build(&model("cfg_g.toml"), &[]).unwrap();
    let s = RateFunctionTable::build(&model("cfg_2s.toml"), &[]).unwrap();
    let tg = (2.0 * 2f64.ln()).sqrt();
    let ts = (2.0 / 3.0 * 6f64.ln()).sqrt();
    // lambda is quadratic, so lambda'(t+-) is t+- (CFG-G) and 1.5 t+- (CFG-2S)
    let (vg, vs) = (tg, 1.5 * ts);
    let errors = [
        (g.t_plus - tg).abs(),
        (g.t_minus + tg).abs(),
        (s.t_plus - ts).abs(),
        (s.t_minus + ts).abs(),
        (g.speed_right - vg).abs(),
        (g.speed_left + vg).abs(),
        (s.speed_right - vs).abs(),
        (s.speed_left + vs).abs(),
        (lambda_prime_of_t(&model("cfg_2s.toml"), s.t_plus) - vs).abs(),
    ];
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let pass = worst <= 1e-8;
    verdict(
        2,
        "critical temperatures and speeds against closed forms",
        pass,
        &format!(
            "t+ = {:.9} / {:.9}, speeds {:.9} / {:.9}, max error {worst:.2e} (tol 1e-8)",
            g.t_plus, s.t_plus, g.speed_right, s.speed_right
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_free_energy() {
    let batch = gaussian_batch();
    let table = RateFunctionTable::build(&model("cfg_g.toml"), &[]).unwrap();
    let limit = table.free_energy_limit();
    let mut pass = batch.elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for (k, &t) in T_VALUES.iter().enumerate() {
        let predicted = limit.value(t);
        let err = median(
            &batch
                .summaries
                .iter()
                .map(|s| (s.at(20).unwrap().free_energy[k] - predicted).abs())
                .collect::<Vec<_>>(),
        );
        let tol = if t == 3.0 { 0.15 } else { 0.05 };
        pass &= err <= tol;
        parts.push(format!("t={t}: {err:.4} (tol {tol})"));
    }
    verdict(
        3,
        "free energy, CFG-G n=20, median over 16 trees",
        pass,
        &format!("{}; {:.1} s", parts.join(", "), batch.elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_04_rightmost_speed() {
    let batch = gaussian_batch();
    let gap = |n: usize| {
        median(
            &batch
                .summaries
                .iter()
                .map(|s| (s.at(n).unwrap().r_n / n as f64 - SPEED_G).abs())
                .collect::<Vec<_>>(),
        )
    };
    let gaps = [gap(10), gap(15), gap(20)];
    let monotone = gaps[1] <= gaps[0] && gaps[2] <= gaps[1];
    let pass = gaps[2] <= 0.25 && monotone;
    verdict(
        4,
        "rightmost speed, CFG-G",
        pass,
        &format!(
            "median |R_n/n - {SPEED_G}| at n=10,15,20: {:.4}, {:.4}, {:.4} (tol 0.25 at n=20, nonincreasing: {monotone})",
            gaps[0], gaps[1], gaps[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_ldp_counts() {
    let batch = gaussian_batch();
    let target = 2f64.ln() - 0.32;
    let values: Vec<f64> = batch.summaries.iter().map(|s| s.at(20).unwrap().upper_rate(0)).collect();
    let err = median(&values.iter().map(|v| (v - target).abs()).collect::<Vec<_>>());
    let pass = err <= 0.08;
    verdict(
        5,
        "LDP counts, CFG-G n=20 x=0.8",
        pass,
        &format!("median rate {:.4} vs {target:.6}, error {err:.4} (tol 0.08)", median(&values)),
    );
    assert!(pass);
}

#[test]
fn criterion_06_quenched_mean_ldp() {
    let start = Instant::now();
    let model = model("cfg_g.toml");
    let env = sample_environment(&model, 400, SEED, 0).unwrap();
    let value = quenched_mean_ldp_exact(&env, 0.8, 400).unwrap();
    let rate = RateFunctionTable::build(&model, &[]).unwrap().lambda_star(0.8).unwrap();
    let elapsed = start.elapsed();
    let err = (value + rate).abs();
    let pass = err <= 0.01 && elapsed < Duration::from_secs(1);
    verdict(
        6,
        "quenched mean LDP, CFG-G n=400 x=0.8",
        pass,
        &format!("value {value:.6}, -lambda*(0.8) = {:.6}, error {err:.2e} (tol 0.01), {:.3} s", -rate, elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_07_main_clt() {
    let grid = standard_grid();
    let reference = normal_reference(&grid);
    let ks_of = |env: &EnvRealization, n: usize| -> Result<(f64, Duration, u64), SimError> {
        let (sorted, moments, elapsed) = single_tree(env, n)?;
        let cdf = clt_cdf_sorted(&sorted, &moments, n, &grid).unwrap();
        Ok((ks_distance(&cdf, &reference).unwrap(), elapsed, sorted.len() as u64))
    };
    let g = model("cfg_g.toml");
    let (ks_g, t_g, count_g) = ks_of(&sample_environment(&g, 20, SEED, 0).unwrap(), 20).unwrap();

    // the first seed-42 environment stream whose tree fits under the cap at n = 18
    let s = model("cfg_2s.toml");
    let (stream, (ks_s, t_s, count_s)) = (0..64)
        .find_map(|stream| match ks_of(&sample_environment(&s, 18, SEED, stream).unwrap(), 18) {
            Ok(v) => Some((stream, v)),
            Err(SimError::PopulationOverflow { .. }) => None,
            Err(e) => panic!("{e}"),
        })
        .expect("some environment fits");
    let limit = Duration::from_secs(60);
    let pass = ks_g <= 0.05 && ks_s <= 0.06 && t_g < limit && t_s < limit;
    verdict(
        7,
        "main CLT, single trees",
        pass,
        &format!(
            "CFG-G n=20 ({count_g} particles) KS {ks_g:.4} (tol 0.05), {:.1} s; CFG-2S n=18 (stream {stream}, {count_s} particles) KS {ks_s:.4} (tol 0.06), {:.1} s",
            t_g.as_secs_f64(),
            t_s.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_local_limit() {
    let h = 0.5;
    let env = sample_environment(&model("cfg_g.toml"), 20, SEED, 0).unwrap();
    let (sorted, moments, _) = single_tree(&env, 20).unwrap();
    let (a, b) = moments.normalizers(20).unwrap();
    let gap = llt_gap_sorted(&sorted, &moments, 20, h, &default_llt_grid(a, b)).unwrap();
    let center = b * sorted.count_open(a, a + h) as f64 / sorted.len() as f64;
    let expected = h * INV_SQRT_2PI;
    let center_err = (center - expected).abs();
    let pass = gap.sup_gap <= 0.05 && center_err <= 0.03;
    verdict(
        8,
        "local limit, CFG-G n=20 h=0.5",
        pass,
        &format!(
            "sup-gap {:.4} (tol 0.05); window (a_n, a_n+h) {center:.4} vs {expected:.6}, error {center_err:.4} (tol 0.03)",
            gap.sup_gap
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_annealed_clt() {
    let start = Instant::now();
    let model = model("cfg_2s.toml");
    let params = annealed_params(&model).unwrap();
    assert!((params.mu_bar + 0.2).abs() < 1e-12 && (params.sigma2_bar - 2.56).abs() < 1e-12);
    let n = 15;
    let grid = standard_grid();
    let plan = SummaryPlan {
        track: vec![n],
        ldp_x: vec![],
        clt_x: grid.clone(),
        llt_h: None,
        fixed_normalizers: vec![(-0.2, 2.56)],
    };
    let config = sim(n, &[]);
    let summaries: Vec<ReplicaSummary> = (0..500u64)
        .map(|r| {
            let env = sample_environment(&model, n, SEED, 1 + r).unwrap();
            let moments = quenched_moments(&env, &[]).unwrap();
            summarize_replica(&env, &moments, &config, r, &plan).unwrap()
        })
        .collect();
    let report = aggregate(AggregateMode::AnnealedCount { normalizer: 0 }, &summaries, n, &grid).unwrap();
    let elapsed = start.elapsed();
    let pass = report.ks <= 0.05 && elapsed < Duration::from_secs(300);
    verdict(
        9,
        "annealed CLT, CFG-2S n=15, 500 fresh environments",
        pass,
        &format!("KS {:.4} (tol 0.05), {:.1} s", report.ks, elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_10_martingale_normalization() {
    let env = sample_environment(&model("cfg_g.toml"), 10, SEED, 0).unwrap();
    let config = sim(10, &[0.5]);
    let (mut w, mut wt) = (Vec::new(), Vec::new());
    for r in 0..200 {
        let (snaps, _) = run_tree_final(&env, &config, r).unwrap();
        w.push(snaps[10].w_n);
        wt.push(snaps[10].w_n_t[0]);
    }
    let (m, se) = mean_and_se(&w);
    let (mt, set) = mean_and_se(&wt);
    let pass = (m - 1.0).abs() <= 4.0 * se && (mt - 1.0).abs() <= 4.0 * set;
    verdict(
        10,
        "martingale normalization, CFG-G n=10, 200 trees",
        pass,
        &format!("mean W_n = {m} (SE {se}); mean W_n(0.5) = {mt:.4} (SE {set:.4})"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_verify_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join("cfg_g.toml");
    let mut reports = Vec::new();
    for run in ["first", "second"] {
        let out = dir.path().join(run);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_brwre"))
            .args(["verify", "--seed", "42", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.code().is_some_and(|c| c == 0 || c == 1), "{status}");
        reports.push(std::fs::read(out.join("verify.json")).unwrap());
    }
    let pass = reports[0] == reports[1];
    verdict(
        11,
        "repeated verify with a fixed seed",
        pass,
        &format!("two runs, {} bytes of JSON each, identical: {pass}", reports[0].len()),
    );
    assert!(pass);
}

#[test]
fn criterion_12_deterministic_tree_is_exact() {
    let model = model("cfg_det.toml");
    let env = sample_environment(&model, 12, SEED, 0).unwrap();
    let snaps = run_tree(&env, &sim(12, &T_VALUES), 0).unwrap();
    let ln2 = 2f64.ln();
    let mut worst = 0.0f64;
    for s in snaps.iter().skip(1) {
        let n = s.n as f64;
        for lz in &s.log_partition {
            worst = worst.max((lz / n - ln2).abs());
        }
        worst = worst.max((s.w_n - 1.0).abs());
        for w in &s.w_n_t {
            worst = worst.max((w - 1.0).abs());
        }
        worst = worst.max(s.r_n.abs()).max(s.l_n.abs());
    }
    let pass = worst == 0.0;
    verdict(
        12,
        "CFG-DET exactness",
        pass,
        &format!("max deviation over n=1..12 of free energy from log 2, W_n from 1, R_n and L_n from 0: {worst:e}"),
    );
    assert!(pass);
}
