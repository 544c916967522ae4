//! The subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fex_core::expr::parse_formula;
use fex_core::problems::{make_benchmark_with_seed, reference_target, PdeProblem, Precision, DEFAULT_GEOMETRY_SEED};
use fex_core::search::{SearchOutcome, SearchRun};

use crate::artifacts::{write_atomic, write_csv, write_json};
use crate::config::{unknown_benchmark, RunConfig};
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint.txt";

/// Overrides shared by `solve` and `reproduce`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
    pub resume: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seeds.search = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    benchmark: &'a str,
    problem: &'a str,
    sequence: String,
    expression: String,
    loss: f64,
    relative_l2: Option<f64>,
    absolute_relative: Option<f64>,
    eigenvalue: Option<f64>,
    exact_eigenvalue: Option<f64>,
    eigenvalue_relative_error: Option<f64>,
    reference_target: Option<f64>,
    iterations: usize,
    seed: u64,
    elapsed_seconds: f64,
}

/// What a finished run reports back.
pub struct RunSummary {
    pub outcome: SearchOutcome,
    pub expression: String,
    pub output_dir: PathBuf,
}

impl RunSummary {
    pub fn eigenvalue_relative_error(&self, problem: &PdeProblem) -> Option<f64> {
        let exact = problem.exact_eigenvalue()?;
        Some((self.outcome.lambda? - exact).abs() / exact.abs())
    }
}

/// Runs a resolved configuration end to end and writes every artifact.
pub fn execute(cfg: &RunConfig, resume: bool) -> Result<RunSummary, CliError> {
    let problem = cfg.problem()?;
    let search = cfg.search_config()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.resolved.toml"), cfg.echo()?.as_bytes())?;

    let started = Instant::now();
    let ckpt = dir.join(CHECKPOINT);
    let mut run = if resume && ckpt.exists() {
        let text = std::fs::read_to_string(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
        let run = SearchRun::restore(&problem, search.clone(), &text)
            .with_context(|| format!("restoring {}", ckpt.display()))?;
        log::info!("resumed at iteration {}", run.iteration());
        run
    } else {
        SearchRun::new(&problem, search.clone())?
    };
    while !run.is_done() {
        run.step()?;
        write_atomic(&ckpt, run.checkpoint().as_bytes())?;
        write_csv(&dir.join("telemetry.csv"), run.telemetry())?;
    }
    let outcome = run.finish()?;
    let elapsed = started.elapsed().as_secs_f64();

    let expression = outcome.best.render(17);
    write_atomic(&dir.join("expression.txt"), format!("{expression}\n").as_bytes())?;
    write_csv(&dir.join("telemetry.csv"), &outcome.telemetry)?;
    write_csv(&dir.join("finetune_trace.csv"), &outcome.trace)?;
    write_csv(&dir.join("candidates.csv"), &outcome.candidates)?;
    write_atomic(&ckpt, run.checkpoint().as_bytes())?;

    let summary = RunSummary {
        outcome,
        expression,
        output_dir: dir.clone(),
    };
    let o = &summary.outcome;
    let metrics = MetricsFile {
        benchmark: &cfg.benchmark,
        problem: &problem.name,
        sequence: o.best.ops().describe(o.best.shape(), &search.library()),
        expression: summary.expression.clone(),
        loss: o.loss,
        relative_l2: o.metrics.map(|m| m.relative_l2),
        absolute_relative: o.metrics.map(|m| m.absolute_relative),
        eigenvalue: o.lambda,
        exact_eigenvalue: problem.exact_eigenvalue(),
        eigenvalue_relative_error: summary.eigenvalue_relative_error(&problem),
        reference_target: reference_target(&cfg.benchmark),
        iterations: search.iterations,
        seed: search.seed,
        elapsed_seconds: elapsed,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(summary)
}

pub fn solve(config: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_file(config)?;
    overrides.apply(&mut cfg);
    let s = execute(&cfg, overrides.resume)?;
    let out = &mut std::io::stdout().lock();
    report(out, &s).map_err(anyhow::Error::from)?;
    Ok(())
}

fn report(out: &mut impl Write, s: &RunSummary) -> std::io::Result<()> {
    writeln!(out, "expression: {}", s.expression)?;
    writeln!(out, "loss: {:e}", s.outcome.loss)?;
    if let Some(m) = s.outcome.metrics {
        writeln!(out, "relative_l2: {:e}", m.relative_l2)?;
        writeln!(out, "absolute_relative: {:e}", m.absolute_relative)?;
    }
    if let Some(l) = s.outcome.lambda {
        writeln!(out, "eigenvalue: {l}")?;
    }
    writeln!(out, "artifacts: {}", s.output_dir.display())
}

/// Runs a benchmark row with its preset (optionally overridden by a config
/// file) and prints the achieved error next to the reference target.
pub fn reproduce(row: &str, config: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let target = reference_target(row).ok_or_else(|| unknown_benchmark(row))?;
    let mut cfg = match config {
        Some(path) => {
            let cfg = RunConfig::from_file(path)?;
            if cfg.benchmark != row {
                return Err(CliError::Config(format!(
                    "{} is for benchmark `{}`, not `{row}`",
                    path.display(),
                    cfg.benchmark
                )));
            }
            cfg
        }
        None => RunConfig::preset(row)?,
    };
    overrides.apply(&mut cfg);
    let s = execute(&cfg, overrides.resume)?;
    let (name, achieved) = match row {
        "pb_ex1_100d" => ("absolute relative error", s.outcome.metrics.map(|m| m.absolute_relative)),
        _ => ("relative L2 error", s.outcome.metrics.map(|m| m.relative_l2)),
    };
    let out = &mut std::io::stdout().lock();
    let print = |out: &mut std::io::StdoutLock| -> std::io::Result<()> {
        report(out, &s)?;
        match achieved {
            Some(a) => writeln!(out, "{row}: {name} achieved {a:.3e}, reference {target:.1e}"),
            None => writeln!(out, "{row}: {name} unavailable, reference {target:.1e}"),
        }
    };
    print(out).map_err(anyhow::Error::from)?;
    Ok(())
}

/// Relative errors of a closed-form expression against a benchmark's exact
/// solution.
pub fn eval(expression: &str, benchmark: &str, n_test: usize, seed: u64) -> Result<(), CliError> {
    let formula = parse_formula(expression).map_err(|e| CliError::Config(format!("cannot parse expression: {e}")))?;
    let problem = make_benchmark_with_seed(benchmark, DEFAULT_GEOMETRY_SEED).map_err(|_| unknown_benchmark(benchmark))?;
    if formula.min_dim() > problem.dim {
        return Err(CliError::Config(format!(
            "expression uses x{} but {benchmark} is {}-dimensional",
            formula.min_dim(),
            problem.dim
        )));
    }
    if n_test == 0 {
        return Err(CliError::Config("--n-test must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = problem.domain.sample_interior(n_test, &mut rng)?;
    let pred: Vec<f64> = points.iter().map(|x| formula.eval(x)).collect();
    let m = problem.metrics_for_values(pred, &points)?;
    println!("relative_l2: {:e}", m.relative_l2);
    println!("absolute_relative: {:e}", m.absolute_relative);
    Ok(())
}

/// Writes sampled interior and boundary points as CSV: `set,stratum,x1..xd`.
pub fn sample_domain(
    benchmark: &str,
    n_interior: usize,
    n_boundary: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let problem = make_benchmark_with_seed(benchmark, DEFAULT_GEOMETRY_SEED).map_err(|_| unknown_benchmark(benchmark))?;
    if n_interior == 0 || n_boundary == 0 {
        return Err(CliError::Config("--n-interior and --n-boundary must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = problem
        .domain
        .sample_batch(n_interior, n_boundary, problem.boundary_split, &mut rng)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["set".to_string(), "stratum".to_string()];
    header.extend((1..=problem.dim).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(anyhow::Error::from)?;
    let mut row = |set: &str, stratum: &str, x: &[f64]| -> csv::Result<()> {
        let mut rec = vec![set.to_string(), stratum.to_string()];
        rec.extend(x.iter().map(f64::to_string));
        w.write_record(&rec)
    };
    for x in batch.interior.iter() {
        row("interior", "", x).map_err(anyhow::Error::from)?;
    }
    let mut points = batch.boundary.iter();
    for (name, count) in &batch.boundary_strata {
        for x in points.by_ref().take(*count) {
            row("boundary", name, x).map_err(anyhow::Error::from)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow::Error::from(e.into_error()))?;
    match out {
        Some(path) => write_atomic(path, &bytes)?,
        None => std::io::stdout().write_all(&bytes).map_err(anyhow::Error::from)?,
    }
    Ok(())
}
