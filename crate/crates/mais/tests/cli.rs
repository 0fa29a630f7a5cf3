use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mais(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mais"))
        .args(args)
        .env_remove("MAIS_WORKERS")
        .output()
        .expect("binary runs")
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

const SMALL: [&str; 8] = [
    "--ensemble",
    "50",
    "--iterations",
    "200",
    "--burn-in",
    "100",
    "--replicas",
    "2",
];

fn run_small(exp: &str, out: &Path, workers: &str) -> Output {
    let mut args = vec![
        "run",
        "--experiment",
        exp,
        "--workers",
        workers,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL);
    mais(&args)
}

#[test]
fn outputs_are_identical_across_runs_and_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run_small("exp2-gauss4d", &a, "1");
    assert!(
        ra.status.success(),
        "{}",
        String::from_utf8_lossy(&ra.stderr)
    );
    assert!(run_small("exp2-gauss4d", &b, "2").status.success());
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert!(fa.len() >= 5);
    assert_eq!(fa, fb);
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    assert!(run_small("exp1-bimodal", &first, "1").status.success());
    let manifest = first.join("manifest.json");
    let second = tmp.path().join("second");
    let out = mais(&[
        "run",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(csv_files(&first), csv_files(&second));
    let names: Vec<String> = csv_files(&first).into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"histogram.csv".to_string()), "{names:?}");
}

#[test]
fn ode_run_writes_posterior_and_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ode");
    let out = run_small("exp3-odeip", &dir, "1");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "posterior.csv",
        "components.csv",
        "problem.txt",
        "manifest.json",
        "cost.csv",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let posterior = fs::read_to_string(dir.join("posterior.csv")).unwrap();
    // header plus one row per interior node and method
    assert!(posterior.lines().count() > 63);
}

#[test]
fn missing_nested_output_directory_is_created() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("x").join("y").join("z");
    let out = mais(&["bias-lab", "--nodes", "11", "--out", dir.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("invariance.csv").exists());
    assert!(dir.join("discrete.csv").exists());
}

#[test]
fn config_errors_exit_with_one_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(
        &bad,
        "[experiment]\nid = \"exp2-gauss4d\"\nseed = 1\nreplicas = 0\n",
    )
    .unwrap();
    let dir = tmp.path().join("never");
    let out = mais(&[
        "run",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.exists());

    let out = mais(&[
        "run",
        "--experiment",
        "exp2-gauss4d",
        "--replicas",
        "0",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = mais(&[
        "run",
        "--experiment",
        "exp2-gauss4d",
        "--workers",
        "0",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.exists());

    let out = mais(&["bias-lab", "--nodes", "10", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn defaults_round_trip_through_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mais(&["defaults", "--experiment", "exp2-gauss4d"]);
    assert!(out.status.success());
    let path = tmp.path().join("exp2.toml");
    fs::write(&path, &out.stdout).unwrap();
    let cfg = mais::config::ExperimentConfig::load(&path).unwrap();
    assert_eq!(
        cfg,
        mais::config::ExperimentConfig::default_for(mais::config::ExperimentId::Gauss4d)
    );
}

#[test]
fn tune_prints_the_trace_and_step() {
    let out = mais(&[
        "tune",
        "--experiment",
        "exp2-gauss4d",
        "--method",
        "aldi-ew",
        "--burn-in",
        "200",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("epoch,step,acceptance,saturated"));
    assert_eq!(text.lines().count(), 1 + 4 + 1);
    assert!(text.contains("tuned h ="));
    let out = mais(&[
        "tune",
        "--experiment",
        "exp2-gauss4d",
        "--method",
        "aldi-pw",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
