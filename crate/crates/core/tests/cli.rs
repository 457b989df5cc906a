//! End-to-end runs of the `brwre` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn brwre(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brwre"))
        .args(args)
        .current_dir(dir)
        .env_remove("BRWRE_OUT_DIR")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map(|d| d.map(|e| e.unwrap().file_name().into_string().unwrap()).collect())
        .unwrap_or_default();
    names.sort();
    names
}

#[test]
fn rates_table_has_601_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rates");
    let cfg = fixture("cfg_g.toml");
    let o = brwre(
        &["rates", "--config", s(&cfg), "--t-min", "-3", "--t-max", "3", "--t-step", "0.01", "--out", s(&out)],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("rates.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["t", "lambda", "lambda_prime", "rho", "lambda_tilde"]
    );
    assert_eq!(reader.records().count(), 601);
    let header: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("rates.json")).unwrap()).unwrap();
    let t_plus = header["t_plus"].as_f64().unwrap();
    assert!((t_plus - 1.177410).abs() < 1e-6);
    assert_eq!(header["schema_version"], 1);
}

#[test]
fn verify_on_deterministic_tree_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let cfg = fixture("cfg_det.toml");
    let o = brwre(&["verify", "--config", s(&cfg), "--seed", "7", "--out", s(&out)], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["fail"], 0);
    assert_eq!(report["summary"]["error"], 0);
    assert!(report["checks"].as_array().unwrap().len() >= 10);

    let text = brwre(&["report", "--input", s(&out.join("verify.json"))], tmp.path());
    assert_eq!(text.status.code(), Some(0));
    assert_eq!(text.stdout, std::fs::read(out.join("verify.txt")).unwrap());
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("cfg_g.toml");
    let mut listings = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = brwre(
            &["simulate", "--config", s(&cfg), "--n", "20", "--replicas", "2", "--seed", "5", "--out", s(&out)],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        listings.push(files_in(&out));
    }
    assert_eq!(listings[0], listings[1]);
    for name in &listings[0] {
        let a = std::fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    assert!(listings[0].contains(&"positions_r1.bin".to_string()));
}

#[test]
fn estimate_reads_a_stored_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let cfg = fixture("cfg_g.toml");
    let o = brwre(
        &["simulate", "--config", s(&cfg), "--n", "10", "--replicas", "2", "--seed", "3", "--out", s(&out)],
        tmp.path(),
    );
    assert!(o.status.success());
    let o = brwre(&["estimate", "--input", s(&out), "--n", "10"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("estimate_n10.json")).unwrap()).unwrap();
    let replicas = est["replicas"].as_array().unwrap();
    assert_eq!(replicas.len(), 2);
    for r in replicas {
        assert_eq!(r["count"], 1024);
        // t = 0 is the first simulation temperature: (1/n) log Z_n(R) = log 2
        assert!((r["free_energy"][0].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
        let w = r["smoothed_mass"].as_f64().unwrap();
        assert!(w > 0.0);
    }
    let mut clt = csv::Reader::from_path(out.join("estimate_clt_n10.csv")).unwrap();
    assert_eq!(clt.headers().unwrap().len(), 4);
    assert_eq!(clt.records().count(), 801);
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(fixture("cfg_g.toml")).unwrap().replace("variance = 1.0", "variance = -1.0");
    std::fs::write(&bad, text).unwrap();
    let out = tmp.path().join("never");
    for sub in ["rates", "simulate", "verify"] {
        let mut args = vec![sub, "--config", s(&bad), "--out", s(&out)];
        if sub != "rates" {
            args.extend(["--seed", "1"]);
        }
        let o = brwre(&args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{sub}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("states[0]"), "{err}");
    }
    let typo = tmp.path().join("typo.toml");
    let text = std::fs::read_to_string(fixture("cfg_g.toml")).unwrap().replace("replicas = 2", "replica = 2");
    std::fs::write(&typo, text).unwrap();
    let o = brwre(&["rates", "--config", s(&typo), "--out", s(&out)], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line") && err.contains("replica"), "{err}");
    assert!(!out.exists());
}

#[test]
fn overflow_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small_cap.toml");
    let text = std::fs::read_to_string(fixture("cfg_g.toml"))
        .unwrap()
        .replace("replicas = 2\n", "replicas = 2\ncap = 1000\n");
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("o");
    let o = brwre(&["simulate", "--config", s(&cfg), "--out", s(&out)], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("overflow"));
    assert!(files_in(&out).is_empty());
}

#[test]
fn output_directory_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("with_dir.toml");
    let text = std::fs::read_to_string(fixture("cfg_det.toml"))
        .unwrap()
        .replace("seed = 7\n", "seed = 7\noutput_dir = \"from_config\"\n");
    std::fs::write(&cfg_path, text).unwrap();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_brwre"));
        c.args(["rates", "--config", s(&cfg_path)]).current_dir(tmp.path()).env_remove("BRWRE_OUT_DIR");
        if let Some(e) = env {
            c.env("BRWRE_OUT_DIR", e);
        }
        if let Some(f) = flag {
            c.args(["--out", f]);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(None, None);
    assert!(tmp.path().join("from_config/rates.csv").exists());
    run(Some("from_env"), None);
    assert!(tmp.path().join("from_env/rates.csv").exists());
    run(Some("from_env2"), Some("from_flag"));
    assert!(tmp.path().join("from_flag/rates.csv").exists());
    assert!(!tmp.path().join("from_env2").exists());
}

#[test]
fn verify_requires_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("no_seed.toml");
    let text = std::fs::read_to_string(fixture("cfg_det.toml")).unwrap().replace("seed = 7\n", "");
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("o");
    let o = brwre(&["verify", "--config", s(&cfg), "--out", s(&out)], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
