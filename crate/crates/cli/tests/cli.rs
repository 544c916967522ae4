use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fex_cli::config::RunConfig;

fn fex(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fex"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn fex")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Reads `name: value` from eval output.
fn field(out: &str, name: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{name}: ")))
        .unwrap_or_else(|| panic!("no {name} in {out}"))
        .trim()
        .parse()
        .unwrap()
}

const TINY: &str = r#"
[search]
iterations = 2
batch_size = 4
pool_capacity = 2
n_interior = 100
n_boundary = 100
fine_interior = 100
fine_boundary = 100
eval_points = 200

[schedule]
t1 = 5
t2 = 5
t3 = 5
t4 = 10
polish = 0
"#;

fn tiny_config(dir: &Path, benchmark: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{benchmark}.toml"));
    fs::write(&path, format!("benchmark = \"{benchmark}\"\n{extra}\n{TINY}")).unwrap();
    path
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = fex(&["solve", "--config", "does/not/exist.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does/not/exist.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "benchmark = \"pb_ex2_10d\"\n[search]\niteratons = 3\n").unwrap();
    let o = fex(&["solve", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("iteratons"), "{}", stderr(&o));
}

#[test]
fn resolved_config_round_trips() {
    let text = format!("benchmark = \"poisson3d_exp\"\nprecision = \"single\"\n{TINY}");
    let cfg = RunConfig::resolve(&text).unwrap();
    assert_eq!(cfg.search.iterations, 2);
    // unset keys come from the preset
    assert_eq!(cfg.schedule.lr1, RunConfig::preset("poisson3d_exp").unwrap().schedule.lr1);
    let again = RunConfig::resolve(&cfg.echo().unwrap()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn benchmark_and_problem_block_conflict() {
    let text = "benchmark = \"pb_ex2_10d\"\n[problem]\nname = \"p\"\n";
    assert!(RunConfig::resolve(text).is_err());
    assert!(RunConfig::resolve("").is_err());
}

#[test]
fn solve_writes_all_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "poisson3d_product", "");
    let cfg = cfg.to_str().unwrap();
    let a = fex(&["--threads", "1", "solve", "--config", cfg, "--seed", "7", "--out", "a"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let b = fex(&["--threads", "3", "solve", "--config", cfg, "--seed", "7", "--out", "b"], dir.path());
    assert!(b.status.success(), "{}", stderr(&b));
    for f in [
        "expression.txt",
        "metrics.json",
        "telemetry.csv",
        "finetune_trace.csv",
        "candidates.csv",
        "checkpoint.txt",
        "config.resolved.toml",
    ] {
        assert!(dir.path().join("a").join(f).is_file(), "missing {f}");
    }
    for f in ["expression.txt", "checkpoint.txt", "candidates.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs between thread counts"
        );
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 7);
    assert!(metrics["relative_l2"].as_f64().unwrap().is_finite());
    let telemetry = fs::read_to_string(dir.path().join("a/telemetry.csv")).unwrap();
    assert_eq!(telemetry.lines().count(), 3);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let short = tiny_config(dir.path(), "poisson2d_holes_a", "");
    let long = dir.path().join("long.toml");
    fs::write(
        &long,
        fs::read_to_string(&short).unwrap().replace("iterations = 2", "iterations = 4"),
    )
    .unwrap();
    let (short, long) = (short.to_str().unwrap(), long.to_str().unwrap());
    assert!(fex(&["solve", "--config", short, "--out", "r"], dir.path()).status.success());
    let resumed = fex(&["solve", "--config", long, "--out", "r", "--resume"], dir.path());
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert!(fex(&["solve", "--config", long, "--out", "f"], dir.path()).status.success());
    for f in ["expression.txt", "checkpoint.txt", "telemetry.csv"] {
        assert_eq!(
            fs::read(dir.path().join("r").join(f)).unwrap(),
            fs::read(dir.path().join("f").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn eval_of_exact_solution_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mu = 7.0 * PI;
    let expr = format!("sin({mu:?}*x1)*sin({mu:?}*x2)");
    let o = fex(&["eval", &expr, "--benchmark", "poisson2d_holes_a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(field(&stdout(&o), "relative_l2") <= 1e-12);
    let o = fex(&["eval", "2*x1^2 + 2*x2^2 + 2*x3^2 + 2*x4^2 + 2*x5^2 + 2*x6^2 + 2*x7^2 + 2*x8^2 + 2*x9^2 + 2*x10^2", "--benchmark", "pb_ex2_10d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(field(&stdout(&o), "relative_l2") <= 1e-12);
}

#[test]
fn eval_of_zero_has_unit_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fex(&["eval", "0", "--benchmark", "pb_ex1_100d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "relative_l2"), 1.0);
    assert_eq!(field(&stdout(&o), "absolute_relative"), 1.0);
}

#[test]
fn eval_of_perturbed_solution_is_close() {
    let dir = tempfile::tempdir().unwrap();
    let o = fex(
        &["eval", "0.9999*sin(21.9911*x1)*sin(21.9911*x2)", "--benchmark", "poisson2d_holes_a"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let e = field(&stdout(&o), "relative_l2");
    assert!(e > 0.0 && e <= 1e-3, "{e}");
}

#[test]
fn eval_rejects_bad_expressions() {
    let dir = tempfile::tempdir().unwrap();
    let o = fex(&["eval", "sin(x1", "--benchmark", "poisson2d_holes_a"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fex(&["eval", "x3", "--benchmark", "poisson2d_holes_a"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reproduce_prints_the_reference_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "poisson2d_holes_b", "");
    let o = fex(
        &["reproduce", "poisson2d_holes_b", "--config", cfg.to_str().unwrap(), "--out", "rep"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("poisson2d_holes_b: relative L2 error achieved"), "{out}");
    assert!(out.contains("reference 8.6e-7"), "{out}");
}

#[test]
fn reproduce_unknown_row_lists_valid_ids() {
    let dir = tempfile::tempdir().unwrap();
    let o = fex(&["reproduce", "table9_row3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for id in fex_core::problems::BENCHMARK_IDS {
        assert!(err.contains(id), "{err}");
    }
}

#[test]
fn sample_domain_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = fex(
        &[
            "sample-domain",
            "--benchmark",
            "poisson2d_holes_b",
            "--n-interior",
            "50",
            "--n-boundary",
            "40",
            "--seed",
            "3",
            "--out",
            "pts.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("pts.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["set", "stratum", "x1", "x2"]);
    let problem = fex_core::problems::make_benchmark("poisson2d_holes_b").unwrap();
    let (mut interior, mut boundary) = (0, 0);
    for rec in r.records() {
        let rec = rec.unwrap();
        let x: Vec<f64> = (2..4).map(|i| rec[i].parse().unwrap()).collect();
        match &rec[0] {
            "interior" => {
                interior += 1;
                assert!(problem.domain.contains(&x));
            }
            "boundary" => {
                boundary += 1;
                assert!(problem.domain.boundary_distance(&x) <= 1e-12);
            }
            other => panic!("{other}"),
        }
    }
    assert_eq!((interior, boundary), (50, 40));
}
