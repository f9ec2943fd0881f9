use std::path::Path;
use std::process::{Command, Output};

use qlab_cli::presets::{find, PRESETS};
use qlab_cli::{run, ExperimentConfig, RunOptions};

fn qlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlab")).args(args).output().unwrap()
}

const MINIMAL: &str = r#"
[environment]
kind = "iid"
marginal = [1.0]
seed = 1

[system]
family = "circle"
alpha = 1.0
fibers = [{ k = 2, eps = 0.0, shape = "sin", mode = 1 }]
potential = { type = "neg_log_derivative" }
observable = { type = "fourier", terms = [{ amp = 1.0, freq = 1, shape = "cos" }] }

[discretization]
resolution = 64
burn_in = 20

[analysis]
run = []
seed = 2
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn list_presets_names_all_five() {
    let out = qlab(&["list-presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("uniform-doubling"));
    assert!(text.lines().count() >= 5);
    for name in ["perturbed-circle", "random-sft-2", "coboundary-null", "mdp-demo"] {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn empty_analysis_list_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", MINIMAL);
    let out_dir = tmp.path().join("out");
    let out = qlab(&["run", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn missing_system_exits_two_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let start = MINIMAL.find("[system]").unwrap();
    let end = MINIMAL.find("[discretization]").unwrap();
    let text = format!("{}{}", &MINIMAL[..start], &MINIMAL[end..]);
    let cfg = write(tmp.path(), "c.toml", &text);
    let out_dir = tmp.path().join("out");
    let out = qlab(&["run", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("system"));
}

#[test]
fn unknown_field_reports_its_line() {
    let text = MINIMAL.replace("burn_in = 20", "burn_in = 20\nbogus = 1");
    let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
    assert!(err.contains("bogus"), "{err}");
    assert!(err.contains("at line "), "{err}");
}

#[test]
fn listed_analysis_needs_its_section() {
    let text = MINIMAL.replace("run = []", "run = [\"var\"]");
    assert!(ExperimentConfig::parse(&text).is_err());
    let text = MINIMAL.replace("run = []", "run = [\"spectra\"]");
    assert!(ExperimentConfig::parse(&text).is_err());
}

#[test]
fn failed_assertion_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("run = []", "run = [\"var\"]") + "\n[analysis.var]\nn_max = 64\nexpect_sigma2 = 0.3\ntol = 0.001\n";
    let cfg = write(tmp.path(), "c.toml", &text);
    let out = qlab(&["run", &cfg, "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn clt_table_has_one_row_per_n() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = find("uniform-doubling").unwrap().config();
    run(&cfg, &RunOptions { out_dir: Some(tmp.path().to_path_buf()), seed_override: None }).unwrap();
    let mut r = csv::Reader::from_path(tmp.path().join("ks_table.csv")).unwrap();
    assert_eq!(r.records().count(), cfg.analysis.clt.unwrap().n_grid.len());
}

#[test]
fn reruns_and_echoed_configs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = find("mdp-demo").unwrap().config();
    let opts = |d: &str| RunOptions { out_dir: Some(tmp.path().join(d)), seed_override: None };
    let a = run(&cfg, &opts("a")).unwrap();
    let b = run(&cfg, &opts("b")).unwrap();
    let echoed = ExperimentConfig::parse(&a.config.toml).unwrap();
    let c = run(&echoed, &opts("c")).unwrap();
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("report.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
    assert_eq!(a, c);
    let _ = b;
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = find("perturbed-circle").unwrap().config();
    let a = run(&cfg, &RunOptions { out_dir: Some(tmp.path().join("a")), seed_override: None }).unwrap();
    let b = run(&cfg, &RunOptions { out_dir: Some(tmp.path().join("b")), seed_override: Some(99) }).unwrap();
    assert_ne!(a.config.sha256, b.config.sha256);
    assert_ne!(a.results["mixing"], b.results["mixing"]);
}

#[test]
fn every_preset_passes_end_to_end() {
    for p in PRESETS {
        let tmp = tempfile::tempdir().unwrap();
        let out = qlab(&["run", "--preset", p.name, "--out-dir", tmp.path().to_str().unwrap(), "--threads", "1"]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", p.name, String::from_utf8_lossy(&out.stdout));
    }
}
