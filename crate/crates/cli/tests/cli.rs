use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panelmix::dgp::{generate, DGPSpec};
use panelmix::MixtureParams;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panelmix"))
}

fn write_panel(dir: &Path, name: &str, params: MixtureParams, n: usize, t: usize, seed: u64) -> PathBuf {
    let d = generate(&DGPSpec::new(params, n, t, seed).unwrap()).unwrap();
    let mut text = String::from("unit,period,y\n");
    for i in 0..d.n() {
        for s in 0..t {
            text.push_str(&format!("{},{},{}\n", d.unit_ids()[i], s + 1, d.y(i, s)));
        }
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

#[test]
fn test_on_separated_mixture_is_highly_significant() {
    let dir = tempfile::tempdir().unwrap();
    let p = MixtureParams::univariate(&[0.5, 0.5], &[-2.0, 2.0], &[1.0, 1.0]);
    let path = write_panel(dir.path(), "sep.csv", p, 200, 3, 11);
    let out = run(&["test", "--input", path.to_str().unwrap(), "--m0", "1", "--draws", "500"]);
    let r = json(&out);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["stars"], "***");
    assert!(r["outcome"]["p_value"].as_f64().unwrap() < 0.01);
    assert_eq!(r["decision"]["reject"], true);
    assert_eq!(r["outcome"]["crit"].as_array().unwrap().len(), 3);
    assert!(r["a_n_source"].is_string());
}

#[test]
fn select_on_homogeneous_data_picks_one_component() {
    let dir = tempfile::tempdir().unwrap();
    let p = MixtureParams::univariate(&[1.0], &[0.0], &[1.0]);
    let path = write_panel(dir.path(), "homog.csv", p, 150, 3, 5);
    let out = run(&["select", "--input", path.to_str().unwrap(), "--mbar", "3", "--draws", "400"]);
    let r = json(&out);
    assert_eq!(r["m_hat"]["sht"], 1);
    assert_eq!(r["sht"]["censored"], false);
}

#[test]
fn same_seed_gives_identical_reports_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = MixtureParams::univariate(&[0.3, 0.7], &[-1.0, 1.0], &[0.8, 1.0]);
    let path = write_panel(dir.path(), "d.csv", p, 120, 2, 3);
    let base = ["test", "--input", path.to_str().unwrap(), "--m0", "1", "--draws", "300", "--seed", "9"];
    let a = run(&[&base[..], &["--threads", "1"]].concat());
    let b = run(&[&base[..], &["--threads", "1"]].concat());
    let c = run(&[&base[..], &["--threads", "3"]].concat());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "unit,period,y\n1,1,0.5\n1,2,0.3\n2,1,0.1\n").unwrap();
    let out = run(&["fit", "--input", path.to_str().unwrap(), "--m", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unbalanced"));

    let out = run(&["fit", "--input", path.to_str().unwrap(), "--m", "1", "--x", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["fit", "--input", dir.path().join("missing.csv").to_str().unwrap(), "--m", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_then_fit_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.toml");
    std::fs::write(
        &model,
        "n = 80\nt = 3\nseed = 1\n[params]\nalpha = [1.0]\ngamma = []\n[[params.components]]\nmu = 2.0\nsigma_sq = 1.0\nbeta = [0.5]\n",
    )
    .unwrap();
    let data = dir.path().join("data.csv");
    let out = run(&["generate", "--config", model.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(json(&out)["n"], 80);

    let fit = ["fit", "--input", data.to_str().unwrap(), "--x", "x1", "--m", "1"];
    let r = json(&run(&fit));
    let c = &r["fit"]["params"]["components"][0];
    assert!((c["mu"].as_f64().unwrap() - 2.0).abs() < 0.3);
    assert!((c["beta"][0].as_f64().unwrap() - 0.5).abs() < 0.2);
    assert_eq!(r["a_n_source"], "sample_size");

    let table = run(&[&fit[..], &["--format", "table"]].concat());
    assert!(String::from_utf8_lossy(&table.stdout).contains("fit.params.components.0.mu"));
    let csv = run(&[&fit[..], &["--format", "csv"]].concat());
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("key,value\n"));
}

#[test]
fn crit_and_score_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let p = MixtureParams::univariate(&[1.0], &[0.0], &[1.0]);
    let path = write_panel(dir.path(), "h.csv", p, 100, 3, 2);
    let dump = dir.path().join("draws.csv");
    let r = json(&run(&["crit", "--input", path.to_str().unwrap(), "--m0", "1", "--draws", "200", "--dump", dump.to_str().unwrap()]));
    let crit = r["crit"].as_array().unwrap();
    let values: Vec<f64> = crit.iter().map(|c| c["value"].as_f64().unwrap()).collect();
    assert!(values[0] <= values[1] && values[1] <= values[2]);
    assert_eq!(std::fs::read_to_string(&dump).unwrap().lines().count(), 201);

    let out = run(&["dump-scores", "--input", path.to_str().unwrap(), "--m0", "1", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert!(text.starts_with("unit,eta0,eta1,lambda0_00"));
}

#[test]
fn an_table_reports_formula_value() {
    let r = json(&run(&["an-table", "--n", "200", "--t", "3", "--m0", "1"]));
    let a = r["a_n"].as_f64().unwrap();
    assert!((0.005..=0.5).contains(&a));
    assert_eq!(r["a_n_source"], "formula");
    let out = run(&["an-table", "--n", "200", "--t", "3", "--m0", "2"]);
    assert_eq!(out.status.code(), Some(2));
}
