//! End-to-end tests of the `procova` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_procova"));
    c.env_remove("PROCOVA_WORKERS").env_remove("RUST_LOG");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Recursive comparison with a relative tolerance on numbers.
fn assert_close(actual: &Value, expected: &Value, path: &str) {
    match (actual, expected) {
        (Value::Number(a), Value::Number(e)) => {
            let (a, e) = (a.as_f64().unwrap(), e.as_f64().unwrap());
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1e-3), "{path}: {a} vs {e}");
        }
        (Value::Array(a), Value::Array(e)) => {
            assert_eq!(a.len(), e.len(), "{path}: length");
            for (i, (x, y)) in a.iter().zip(e).enumerate() {
                assert_close(x, y, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(a), Value::Object(e)) => {
            assert_eq!(a.keys().collect::<Vec<_>>(), e.keys().collect::<Vec<_>>(), "{path}: keys");
            for (k, y) in e {
                assert_close(&a[k], y, &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(actual, expected, "{path}"),
    }
}

// The golden values agree with an independent dense REML fit (generic
// optimizer over a Cholesky-parameterized Ψ) to all printed digits.
#[test]
fn fit_matches_golden() {
    let out = run(&["fit", "--input", fixture("toy.csv").to_str().unwrap()]);
    let doc = json(&out);
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("fit_toy.golden.json")).unwrap()).unwrap();
    assert_close(&doc["result"], &golden, "result");
    assert_eq!(doc["meta"]["tool"], "procova");
    assert_eq!(doc["meta"]["command"], "fit");
    assert_eq!(doc["meta"]["ladder"]["selected"], "unstructured");
}

#[test]
fn single_visit_fit_is_pooled_two_sample_t() {
    let dir = tempfile::tempdir().unwrap();
    let control = [3.1, 2.4, 4.0, 3.3, 2.9, 3.6];
    let treated = [4.2, 3.9, 5.1, 4.4, 3.7];
    let mut csv = String::from("id,visit,arm,outcome,score\n");
    for (i, y) in control.iter().enumerate() {
        csv.push_str(&format!("c{i},1,0,{y},0\n"));
    }
    for (i, y) in treated.iter().enumerate() {
        csv.push_str(&format!("t{i},1,1,{y},0\n"));
    }
    let path = dir.path().join("two.csv");
    std::fs::write(&path, csv).unwrap();
    let doc = json(&run(&["fit", "--input", path.to_str().unwrap(), "--model", "unadjusted", "--vcov", "model"]));
    let e = &doc["result"]["effect"];

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss = |v: &[f64]| v.iter().map(|y| (y - mean(v)).powi(2)).sum::<f64>();
    let (n0, n1) = (control.len() as f64, treated.len() as f64);
    let s2 = (ss(&control) + ss(&treated)) / (n0 + n1 - 2.0);
    let diff = mean(&treated) - mean(&control);
    let se = (s2 * (1.0 / n0 + 1.0 / n1)).sqrt();
    assert!((e["estimate"].as_f64().unwrap() - diff).abs() < 1e-9);
    assert!((e["se"].as_f64().unwrap() - se).abs() < 1e-7);
    assert!((e["df"].as_f64().unwrap() - (n0 + n1 - 2.0)).abs() < 1e-4);
}

#[test]
fn csv_format_and_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--format",
        "csv",
        "--output",
        dir.path().to_str().unwrap(),
        "fit",
        "--input",
        fixture("toy.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("# tool: procova"));
    let body: Vec<&str> = stdout.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "term,estimate,se");
    assert_eq!(body.len(), 7);
    assert!(body[4].starts_with("treatment:visit 2,1.2104977"));
    let written = std::fs::read_to_string(dir.path().join("coefficients.csv")).unwrap();
    assert_eq!(written, stdout);
    let effect: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("effect.json")).unwrap()).unwrap();
    assert!(effect["result"]["effect"]["estimate"].is_number());
}

#[test]
fn power_reports_textbook_sample_size() {
    // λ = 0 removes the score adjustment: n = 4σ²(z₀.₉₇₅ + z₀.₈)²/β², rounded up to even
    let doc = json(&run(&["power", "--sigma", "10", "--r", "0.5", "--lambda", "0", "--beta", "2"]));
    let n = doc["result"]["min_sample_size"]["n"].as_f64().unwrap();
    assert_eq!(n, 786.0);
    assert!(doc["result"]["min_sample_size"]["power"].as_f64().unwrap() >= 0.8);
}

#[test]
fn power_reduction_fraction_without_sigma() {
    let doc = json(&run(&["power", "--r", "0.391"]));
    let f = doc["result"]["reduction_fraction"].as_f64().unwrap();
    assert!((f - 0.391f64.powi(2)).abs() < 1e-12);
    assert!((f - 0.153).abs() < 5e-4);
    assert!(doc["result"].get("min_sample_size").is_none());
}

#[test]
fn power_curve_csv_is_monotone() {
    let out = run(&[
        "power", "--sigma", "8", "--r", "0.6", "--beta", "1.5", "--lambda", "0.9", "--gamma", "1.1", "--dropout", "0.2",
        "--n-range", "100:1000:100", "--format", "csv",
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let powers: Vec<f64> = stdout
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(powers.len(), 10);
    assert!(powers.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn config_overlay_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plan.toml");
    std::fs::write(&cfg, "[power]\nsigma = 10.0\nr = 0.5\nlambda = 0.0\nbeta = 5.0\n").unwrap();
    let doc = json(&run(&["--config", cfg.to_str().unwrap(), "power", "--beta", "2"]));
    let config = &doc["meta"]["config"];
    assert_eq!(config["sigma"], 10.0);
    assert_eq!(config["beta"], 2.0);
    assert_eq!(config["alpha"], 0.05);
    assert_eq!(doc["result"]["min_sample_size"]["n"], 786.0);

    // top-level keys serve commands without a section
    std::fs::write(&cfg, "format = \"csv\"\nsigma = 10.0\nr = 0.5\nbeta = 2.0\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "power"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("# tool: procova"));
}

#[test]
fn simulate_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "seed = 11\n[simulate]\nreplicates = 6\nn_per_arm = 80\n").unwrap();
    let a = json(&run(&["--config", cfg.to_str().unwrap(), "--workers", "1", "simulate"]));
    let b = json(&run(&["--config", cfg.to_str().unwrap(), "--workers", "3", "simulate"]));
    assert_eq!(a["result"], b["result"]);
    assert_eq!(a["meta"]["seed"], 11);
    assert_eq!(a["result"]["replicates"], 6);
    let c = json(&run(&["--config", cfg.to_str().unwrap(), "--seed", "12", "simulate"]));
    assert_ne!(a["result"]["procova"], c["result"]["procova"]);
}

#[test]
fn simulate_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out_dir = dir.path().join(name);
            let out = run(&[
                "--seed", "5", "--output", out_dir.to_str().unwrap(), "simulate", "--replicates", "10", "--n-per-arm",
                "60",
            ]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
            for f in ["report.json", "report.csv", "replicates.csv"] {
                assert!(out_dir.join(f).exists(), "{f}");
            }
            out.stdout
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    let replicates = |n: &str| std::fs::read(dir.path().join(n).join("replicates.csv")).unwrap();
    assert_eq!(replicates("a"), replicates("b"));
    let doc: Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert!(doc["meta"]["ladder"]["fallbacks"]["procova"].is_number());
}

#[test]
fn validate_scores_reports_each_visit() {
    let doc = json(&run(&["validate-scores", "--input", fixture("toy.csv").to_str().unwrap(), "--arm", "all"]));
    let visits = doc["result"]["visits"].as_array().unwrap();
    assert_eq!(visits.len(), 2);
    assert_eq!(visits[0]["n"], 10);
    assert_eq!(visits[1]["n"], 8);
    let r = visits[0]["r"].as_f64().unwrap();
    assert!((r - 0.8346894580000912).abs() < 1e-12);
}

#[test]
fn ess_reports_effective_sample_size() {
    let doc = json(&run(&["ess", "--v-benchmark", "0.15", "--v-new", "0.12", "--n", "2000"]));
    assert!((doc["result"]["ess"].as_f64().unwrap() - 2500.0).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    let toy = fixture("toy.csv");
    let toy = toy.to_str().unwrap();
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(code(&run(&["fit"])), 64, "missing --input");
    assert_eq!(code(&run(&["fit", "--input", toy, "--vcov", "bogus"])), 64);
    assert_eq!(code(&run(&["fit", "--input", "/nonexistent/file.csv"])), 1);
    assert_eq!(code(&run(&["power", "--sigma", "10", "--r", "1.5", "--beta", "2"])), 1);
    assert_eq!(code(&run(&["fit", "--input", toy, "--adjust", "cov_9"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[simulate]\nbogus = 1\n").unwrap();
    assert_eq!(code(&run(&["--config", bad.to_str().unwrap(), "simulate"])), 1);

    // constant scores alias the score columns: a numerical failure
    let text = std::fs::read_to_string(fixture("toy.csv")).unwrap();
    let flat: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let mut f: Vec<&str> = l.split(',').collect();
                f[4] = "1.0";
                format!("{}\n", f.join(","))
            }
        })
        .collect();
    let path = dir.path().join("flat.csv");
    std::fs::write(&path, flat).unwrap();
    let out = run(&["fit", "--input", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank deficient"));
}
