//! The search loop: sample sequences from the policy, score them by coarse
//! tuning, regroup and retrain the best, update the policy and keep a pool
//! of the best distinct sequences, then fine-tune the pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{score, Policy, PolicyConfig, ScoredSequence};
use crate::error::{FexError, Result};
use crate::expr::{Expression, OperatorLibrary, OperatorSequence, TreeShape, DEFAULT_BASE_FREQUENCIES};
use crate::geometry::Points;
use crate::problems::{ErrorMetrics, PdeProblem, PreparedBatch, BENCHMARK_IDS};
use crate::tuner::{fine_tune, group_parameters, medium_tune, FineOptions, Schedule, TracePoint, TuneFlags};

/// Fixed-capacity store of the best distinct sequences, sorted by score
/// (best first).
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    capacity: usize,
    entries: Vec<ScoredSequence>,
}

impl CandidatePool {
    pub fn new(capacity: usize) -> Self {
        CandidatePool {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[ScoredSequence] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lowest stored score.
    pub fn floor(&self) -> Option<f64> {
        self.entries.last().map(|e| e.score)
    }

    /// Inserts `candidate` if it belongs among the top `capacity`; an
    /// already-pooled sequence is replaced only by a strictly better score.
    /// Returns whether the pool changed.
    pub fn offer(&mut self, candidate: ScoredSequence) -> bool {
        if let Some(i) = self.entries.iter().position(|e| e.ops == candidate.ops) {
            if candidate.score <= self.entries[i].score {
                return false;
            }
            self.entries[i] = candidate;
        } else if self.entries.len() < self.capacity {
            self.entries.push(candidate);
        } else if self.floor().is_some_and(|f| candidate.score > f) {
            self.entries.pop();
            self.entries.push(candidate);
        } else {
            return false;
        }
        // stable: among equal scores the earlier arrival stays ahead
        self.entries.sort_by(|a, b| b.score.total_cmp(&a.score));
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Search iterations T.
    pub iterations: usize,
    /// Sequences sampled per iteration N.
    pub batch_size: usize,
    /// Pool capacity K.
    pub pool_capacity: usize,
    /// Collocation points for scoring.
    pub n_interior: usize,
    pub n_boundary: usize,
    /// Collocation points per fine-tune iteration.
    pub fine_interior: usize,
    pub fine_boundary: usize,
    /// Test points for the reported error metrics; 0 disables metrics.
    pub eval_points: usize,
    pub grouping: bool,
    pub seed: u64,
    pub metrics_seed: u64,
    pub depth: u8,
    pub base_frequencies: Vec<u32>,
    pub trace_every: usize,
    pub schedule: Schedule,
    pub controller: PolicyConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 50,
            batch_size: 16,
            pool_capacity: 10,
            n_interior: 1000,
            n_boundary: 1000,
            fine_interior: 1000,
            fine_boundary: 1000,
            eval_points: 10_000,
            grouping: true,
            seed: 0,
            metrics_seed: 1,
            depth: 2,
            base_frequencies: DEFAULT_BASE_FREQUENCIES.to_vec(),
            trace_every: 50,
            schedule: Schedule::default(),
            controller: PolicyConfig::default(),
        }
    }
}

impl SearchConfig {
    /// Defaults for `problem`: 100 iterations for eigenproblems, 50 otherwise,
    /// with the coarse BFGS budget and final polish raised to desk-scale
    /// values.
    pub fn for_problem(problem: &PdeProblem) -> Self {
        SearchConfig {
            iterations: if problem.is_eigen() { 100 } else { 50 },
            schedule: Schedule {
                t2: 60,
                polish: 200,
                ..Schedule::default()
            },
            ..SearchConfig::default()
        }
    }

    /// Settings for a named benchmark; see [`BENCHMARK_IDS`].
    pub fn preset(benchmark: &str) -> Result<Self> {
        if !BENCHMARK_IDS.contains(&benchmark) {
            return Err(FexError::UnknownBenchmark(benchmark.to_string()));
        }
        let eigen = benchmark.starts_with("laplace_eigen");
        let mut cfg = SearchConfig {
            iterations: if eigen { 100 } else { 50 },
            schedule: Schedule {
                t2: 60,
                polish: 200,
                ..Schedule::default()
            },
            ..SearchConfig::default()
        };
        if benchmark == "pb_ex1_100d" {
            // 100-d candidates are ten times dearer to tune
            cfg.iterations = 20;
            cfg.batch_size = 8;
            cfg.eval_points = 2000;
        }
        if benchmark.starts_with("poisson3d") {
            // low-dimensional enough that grouping is skipped
            cfg.grouping = false;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(FexError::Config(m.to_string()));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.pool_capacity == 0 {
            return fail("pool_capacity must be at least 1");
        }
        if self.n_interior == 0 || self.n_boundary == 0 || self.fine_interior == 0 || self.fine_boundary == 0 {
            return fail("collocation point counts must be positive");
        }
        if self.base_frequencies.is_empty() {
            return fail("base_frequencies must not be empty");
        }
        let s = &self.schedule;
        let rates_ok = [s.lr1, s.lr3, s.lr4].iter().all(|r| r.is_finite() && *r > 0.0);
        if !rates_ok || !(s.eta.is_finite() && s.eta >= 0.0) {
            return fail("schedule learning rates must be positive and eta non-negative");
        }
        TreeShape::new(self.depth)?;
        self.controller.validate()
    }

    pub fn shape(&self) -> Result<TreeShape> {
        TreeShape::new(self.depth)
    }

    pub fn library(&self) -> OperatorLibrary {
        OperatorLibrary::multiscale(&self.base_frequencies)
    }
}

/// Per-iteration search diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TelemetryRow {
    pub iteration: usize,
    /// Lowest batch loss after the regrouping overwrite; +∞ if every
    /// candidate was poisoned.
    pub best_loss: f64,
    pub best_sequence: String,
    /// The (1 − ν) score quantile used by the policy update.
    pub quantile: f64,
    pub pool_floor: f64,
    pub pool_size: usize,
    pub retained: usize,
    /// Policy update skipped because every score was zero.
    pub noop: bool,
    /// Regrouped retraining replaced the best candidate.
    pub regrouped: bool,
    pub shared_parameters: usize,
    pub poisoned: usize,
    /// `best_loss`, `quantile` and `pool_floor` are all finite.
    pub finite: bool,
}

/// One pool entry after fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalCandidate {
    pub sequence: String,
    pub coarse_loss: f64,
    /// Loss on the common evaluation batch after fine-tuning.
    pub fine_loss: f64,
    pub expression: String,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: Expression,
    pub loss: f64,
    pub metrics: Option<ErrorMetrics>,
    pub lambda: Option<f64>,
    /// Fine-tuned pool, in pool order.
    pub candidates: Vec<FinalCandidate>,
    /// Fine-tune trace of the returned expression.
    pub trace: Vec<TracePoint>,
    pub telemetry: Vec<TelemetryRow>,
}

/// Marks the post-search random streams.
const FINAL_STAGE: u64 = 1 << 40;

/// Independent stream for `(seed, iteration, lane)`; lane 0 samples
/// sequences, lane 1 the collocation batch, lane `2 + i` candidate `i`.
fn stream(seed: u64, iteration: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration << 20) | lane);
    rng
}

/// A resumable search.
pub struct SearchRun<'a> {
    problem: &'a PdeProblem,
    config: SearchConfig,
    shape: TreeShape,
    library: OperatorLibrary,
    iteration: usize,
    policy: Policy,
    pool: CandidatePool,
    telemetry: Vec<TelemetryRow>,
}

impl<'a> SearchRun<'a> {
    pub fn new(problem: &'a PdeProblem, config: SearchConfig) -> Result<Self> {
        let library = config.library();
        Self::with_library(problem, config, library)
    }

    /// A search over a custom operator library.
    pub fn with_library(problem: &'a PdeProblem, config: SearchConfig, library: OperatorLibrary) -> Result<Self> {
        config.validate()?;
        let shape = config.shape()?;
        let policy = Policy::uniform(&shape, &library, config.controller);
        Ok(SearchRun {
            problem,
            pool: CandidatePool::new(config.pool_capacity),
            config,
            shape,
            library,
            iteration: 0,
            policy,
            telemetry: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn pool(&self) -> &CandidatePool {
        &self.pool
    }

    pub fn telemetry(&self) -> &[TelemetryRow] {
        &self.telemetry
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    /// Scores every sequence of `ops` on one batch, in parallel.
    fn score_all(&self, ops: &[OperatorSequence], iteration: u64) -> Result<(PreparedBatch, Vec<ScoredSequence>)> {
        let seed = self.config.seed;
        let batch = self
            .problem
            .sample(self.config.n_interior, self.config.n_boundary, &mut stream(seed, iteration, 1))?;
        let scored = ops
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let mut rng = stream(seed, iteration, 2 + i as u64);
                score(e, &self.shape, &self.library, self.problem, &batch, &self.config.schedule, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok((batch, scored))
    }

    /// One search iteration.
    pub fn step(&mut self) -> Result<&TelemetryRow> {
        let t = self.iteration as u64;
        let seed = self.config.seed;
        let mut rng = stream(seed, t, 0);
        let ops: Vec<OperatorSequence> = (0..self.config.batch_size).map(|_| self.policy.sample(&mut rng)).collect();
        let (batch, mut scored) = self.score_all(&ops, t)?;

        let best = scored
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
            .map(|(i, _)| i)
            .expect("batch is non-empty");
        let mut regrouped = false;
        let mut shared = 0;
        if self.config.grouping && scored[best].loss.is_finite() {
            let (plan, mut grouped) = group_parameters(&scored[best].expr, self.config.schedule.eta);
            shared = plan.shared_parameters();
            let out = medium_tune(&mut grouped, self.problem, &batch, &self.config.schedule);
            // overwrite when retraining is at least as good
            if out.loss <= scored[best].loss {
                let flags = scored[best].flags;
                scored[best] = ScoredSequence::new(grouped, out.loss, flags);
                regrouped = true;
            }
        }

        let rewards: Vec<(OperatorSequence, f64)> = scored.iter().map(|s| (s.ops.clone(), s.score)).collect();
        let report = self.policy.update(&rewards)?;
        let best_loss = scored[best].loss;
        let best_sequence = scored[best].ops.describe(&self.shape, &self.library);
        let poisoned = scored.iter().filter(|s| !s.loss.is_finite()).count();
        for s in scored {
            self.pool.offer(s);
        }
        let pool_floor = self.pool.floor().unwrap_or(0.0);
        log::info!(
            "iteration {}: best loss {best_loss:.3e} {best_sequence}, quantile {:.3e}, pool floor {pool_floor:.3e}",
            self.iteration,
            report.quantile
        );
        self.telemetry.push(TelemetryRow {
            iteration: self.iteration,
            best_loss,
            best_sequence,
            quantile: report.quantile,
            pool_floor,
            pool_size: self.pool.len(),
            retained: report.retained,
            noop: report.noop,
            regrouped,
            shared_parameters: shared,
            poisoned,
            finite: best_loss.is_finite() && report.quantile.is_finite() && pool_floor.is_finite(),
        });
        self.iteration += 1;
        Ok(self.telemetry.last().expect("row just pushed"))
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Fine-tunes every pool entry and returns the one with the lowest loss
    /// on a common evaluation batch.
    pub fn finish(&self) -> Result<SearchOutcome> {
        if self.pool.is_empty() {
            return Err(FexError::EmptyPool);
        }
        let cfg = &self.config;
        let eval_batch = self
            .problem
            .sample(cfg.n_interior, cfg.n_boundary, &mut stream(cfg.seed, FINAL_STAGE, 0))?;
        let test_points: Option<Points> = match (self.problem.exact, cfg.eval_points) {
            (Some(_), n) if n > 0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.metrics_seed);
                Some(self.problem.domain.sample_interior(n, &mut rng)?)
            }
            _ => None,
        };
        let options = FineOptions {
            n_interior: cfg.fine_interior,
            n_boundary: cfg.fine_boundary,
            trace_every: cfg.trace_every,
            test_points: test_points.as_ref(),
        };
        let tuned: Vec<(Expression, f64, Vec<TracePoint>)> = self
            .pool
            .entries()
            .par_iter()
            .enumerate()
            .map(|(j, entry)| {
                let mut expr = entry.expr.clone();
                let mut rng = stream(cfg.seed, FINAL_STAGE, 1 + j as u64);
                let out = fine_tune(&mut expr, self.problem, &cfg.schedule, options, &mut rng)?;
                let loss = match self.problem.loss(&expr, &eval_batch) {
                    Ok(r) if r.finite => r.total,
                    _ => f64::INFINITY,
                };
                Ok((expr, loss, out.trace))
            })
            .collect::<Result<_>>()?;

        let candidates: Vec<FinalCandidate> = self
            .pool
            .entries()
            .iter()
            .zip(&tuned)
            .map(|(entry, (expr, loss, _))| FinalCandidate {
                sequence: entry.ops.describe(&self.shape, &self.library),
                coarse_loss: entry.loss,
                fine_loss: *loss,
                expression: expr.render(6),
            })
            .collect();
        let winner = tuned
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i)
            .expect("pool is non-empty");
        let (best, loss, trace) = tuned.into_iter().nth(winner).expect("winner index in range");
        let metrics = match &test_points {
            Some(pts) => Some(self.problem.error_metrics(&best, pts)?),
            None => None,
        };
        Ok(SearchOutcome {
            lambda: best.lambda(),
            best,
            loss,
            metrics,
            candidates,
            trace,
            telemetry: self.telemetry.clone(),
        })
    }

    /// Plain-text snapshot of the mutable search state. Restoring it with
    /// the same problem and config continues the run bit-identically.
    pub fn checkpoint(&self) -> String {
        let mut out = String::from("fex-search-checkpoint 1\n");
        out.push_str(&format!(
            "run seed={} batch_size={} pool_capacity={} depth={}\n",
            self.config.seed, self.config.batch_size, self.config.pool_capacity, self.config.depth
        ));
        out.push_str(&format!("iteration {}\n", self.iteration));
        out.push_str(&self.policy.to_text());
        for e in self.pool.entries() {
            out.push_str(&format!("entry {} {}\n", e.loss, flag_bits(e.flags)));
            out.push_str(&format!("ops {}\n", e.ops));
            out.push_str(&format!("params {}\n", join(e.expr.params())));
            match e.expr.lambda_index() {
                Some(i) => out.push_str(&format!("lambda {i}\n")),
                None => out.push_str("lambda -\n"),
            }
            for leaf in e.expr.leaves() {
                out.push_str(&format!("leaf {} | {} | {}\n", join(&leaf.alpha), join(&leaf.weight), leaf.bias));
            }
        }
        for r in &self.telemetry {
            out.push_str(&format!(
                "telemetry {} {} {} {} {} {} {} {} {} {} {} {}\n",
                r.iteration,
                r.best_loss,
                r.best_sequence,
                r.quantile,
                r.pool_floor,
                r.pool_size,
                r.retained,
                r.noop,
                r.regrouped,
                r.shared_parameters,
                r.poisoned,
                r.finite
            ));
        }
        out.push_str("end\n");
        out
    }

    /// Rebuilds a run from [`SearchRun::checkpoint`] output.
    pub fn restore(problem: &'a PdeProblem, config: SearchConfig, text: &str) -> Result<Self> {
        let library = config.library();
        Self::restore_with_library(problem, config, library, text)
    }

    pub fn restore_with_library(problem: &'a PdeProblem, config: SearchConfig, library: OperatorLibrary, text: &str) -> Result<Self> {
        let mut run = Self::with_library(problem, config, library)?;
        let bad = |m: String| FexError::Checkpoint(m);
        let mut lines = text.lines().peekable();
        if lines.next() != Some("fex-search-checkpoint 1") {
            return Err(bad("missing header".into()));
        }
        let expect_run = format!(
            "run seed={} batch_size={} pool_capacity={} depth={}",
            run.config.seed, run.config.batch_size, run.config.pool_capacity, run.config.depth
        );
        match lines.next() {
            Some(l) if l == expect_run => {}
            other => return Err(bad(format!("checkpoint was written for a different run: {other:?}"))),
        }
        run.iteration = lines
            .next()
            .and_then(|l| l.strip_prefix("iteration "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing iteration".into()))?;

        let mut policy_rows = String::new();
        while let Some(l) = lines.next_if(|l| l.starts_with("slot ")) {
            policy_rows.push_str(l);
            policy_rows.push('\n');
        }
        run.policy = Policy::from_text(&policy_rows, run.config.controller)?;
        if run.policy.num_slots() != run.shape.num_slots() {
            return Err(bad("policy does not match the tree shape".into()));
        }

        let mut entries = Vec::new();
        while let Some(l) = lines.next_if(|l| l.starts_with("entry ")) {
            let mut f = l.split_whitespace().skip(1);
            let loss: f64 = parse_field(f.next(), "entry loss")?;
            let flags = unflag_bits(parse_field(f.next(), "entry flags")?);
            let ops = OperatorSequence::new(parse_list(lines.next().and_then(|l| l.strip_prefix("ops")), "ops")?);
            let params: Vec<f64> = parse_list(lines.next().and_then(|l| l.strip_prefix("params")), "params")?;
            let lambda = match lines.next().and_then(|l| l.strip_prefix("lambda ")) {
                Some("-") => None,
                Some(v) => Some(parse_field(Some(v), "lambda")?),
                None => return Err(bad("missing lambda row".into())),
            };
            let mut layout = Vec::new();
            while let Some(l) = lines.next_if(|l| l.starts_with("leaf ")) {
                let parts: Vec<&str> = l["leaf ".len()..].split('|').collect();
                if parts.len() != 3 {
                    return Err(bad(format!("bad leaf row `{l}`")));
                }
                layout.push((
                    parse_list(Some(parts[0]), "alpha")?,
                    parse_list(Some(parts[1]), "weight")?,
                    parse_field(Some(parts[2].trim()), "bias")?,
                ));
            }
            let expr = Expression::build_with(run.shape, ops, &run.library, problem.dim, |_| 0.0)?
                .with_layout(layout, params, lambda)
                .map_err(|e| bad(e.to_string()))?;
            entries.push(ScoredSequence::new(expr, loss, flags));
        }
        if entries.len() > run.config.pool_capacity {
            return Err(bad("more pool entries than capacity".into()));
        }
        run.pool.entries = entries;

        while let Some(l) = lines.next_if(|l| l.starts_with("telemetry ")) {
            let f: Vec<&str> = l.split_whitespace().skip(1).collect();
            if f.len() != 12 {
                return Err(bad(format!("bad telemetry row `{l}`")));
            }
            run.telemetry.push(TelemetryRow {
                iteration: parse_field(Some(f[0]), "iteration")?,
                best_loss: parse_field(Some(f[1]), "best_loss")?,
                best_sequence: f[2].to_string(),
                quantile: parse_field(Some(f[3]), "quantile")?,
                pool_floor: parse_field(Some(f[4]), "pool_floor")?,
                pool_size: parse_field(Some(f[5]), "pool_size")?,
                retained: parse_field(Some(f[6]), "retained")?,
                noop: parse_field(Some(f[7]), "noop")?,
                regrouped: parse_field(Some(f[8]), "regrouped")?,
                shared_parameters: parse_field(Some(f[9]), "shared_parameters")?,
                poisoned: parse_field(Some(f[10]), "poisoned")?,
                finite: parse_field(Some(f[11]), "finite")?,
            });
        }
        if lines.next() != Some("end") {
            return Err(bad("truncated checkpoint".into()));
        }
        Ok(run)
    }
}

/// Runs a full search with the default operator library for `config`.
pub fn run_search(problem: &PdeProblem, config: SearchConfig) -> Result<SearchOutcome> {
    let mut run = SearchRun::new(problem, config)?;
    run.run()?;
    run.finish()
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| FexError::Checkpoint(format!("bad or missing {what}")))
}

fn parse_list<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<Vec<T>> {
    let s = s.ok_or_else(|| FexError::Checkpoint(format!("missing {what} row")))?;
    s.split_whitespace()
        .map(|v| v.parse().map_err(|_| FexError::Checkpoint(format!("bad value `{v}` in {what}"))))
        .collect()
}

fn flag_bits(f: TuneFlags) -> u8 {
    u8::from(f.line_search_failed) | u8::from(f.non_finite_gradient) << 1 | u8::from(f.degenerate) << 2
}

fn unflag_bits(b: u8) -> TuneFlags {
    TuneFlags {
        line_search_failed: b & 1 != 0,
        non_finite_gradient: b & 2 != 0,
        degenerate: b & 4 != 0,
    }
}
