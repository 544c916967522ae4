//! Continuous-parameter optimization of a fixed operator sequence.
//!
//! Coarse tuning (Adam then BFGS on one batch) is what scores a candidate;
//! medium tuning retrains a regrouped candidate; fine tuning polishes pool
//! entries with Adam on a fresh batch each iteration.

mod adam;
mod bfgs;
mod grouping;

pub use adam::Adam;
pub use bfgs::{Bfgs, BfgsStatus};
pub use grouping::{group_parameters, single_linkage, GroupingPlan, LeafGroups};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expr::Expression;
use crate::geometry::Points;
use crate::problems::{rayleigh_init, PdeProblem, PreparedBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Coarse Adam iterations.
    pub t1: usize,
    pub lr1: f64,
    /// Coarse BFGS iterations.
    pub t2: usize,
    /// Adam iterations after parameter grouping.
    pub t3: usize,
    pub lr3: f64,
    /// Fine-tune Adam iterations.
    pub t4: usize,
    pub lr4: f64,
    /// BFGS iterations run on one fixed batch after fine-tune Adam; 0 disables.
    pub polish: usize,
    /// Grouping merge threshold.
    pub eta: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            t1: 100,
            lr1: 1e-2,
            t2: 20,
            t3: 200,
            lr3: 1e-3,
            t4: 2000,
            lr4: 1e-4,
            polish: 0,
            eta: 0.05,
        }
    }
}

/// Diagnostics collected while tuning; never fatal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TuneFlags {
    pub line_search_failed: bool,
    pub non_finite_gradient: bool,
    /// Rayleigh initialization was impossible (ũ ≈ 0 or constant).
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TuneOutcome {
    /// Best loss seen; +∞ for a poisoned candidate.
    pub loss: f64,
    pub flags: TuneFlags,
}

/// Loss-and-gradient over the parameter vector of a private copy of `expr`.
struct Objective<'a> {
    problem: &'a PdeProblem,
    expr: Expression,
}

impl<'a> Objective<'a> {
    fn new(problem: &'a PdeProblem, expr: &Expression) -> Self {
        Objective {
            problem,
            expr: expr.clone(),
        }
    }

    fn eval(&mut self, batch: &PreparedBatch, params: &[f64], grad: &mut [f64]) -> f64 {
        self.expr.set_params(params);
        match self.problem.loss_grad(&self.expr, batch, grad) {
            Ok(r) if r.finite => r.total,
            _ => f64::INFINITY,
        }
    }
}

/// Tracks the best parameter vector seen.
struct Best {
    loss: f64,
    params: Vec<f64>,
}

impl Best {
    fn new(params: &[f64]) -> Self {
        Best {
            loss: f64::INFINITY,
            params: params.to_vec(),
        }
    }

    fn offer(&mut self, loss: f64, params: &[f64]) {
        if loss < self.loss {
            self.loss = loss;
            self.params.copy_from_slice(params);
        }
    }
}

/// Sets λ from the Rayleigh quotient over the interior batch.
pub fn init_lambda(expr: &mut Expression, points: &Points) -> Result<f64> {
    let l0 = rayleigh_init(expr, points)?;
    expr.set_lambda(l0);
    Ok(l0)
}

/// `iters` Adam steps on a fixed batch, tracking the best iterate.
fn adam_phase(obj: &mut Objective, batch: &PreparedBatch, params: &mut [f64], iters: usize, lr: f64, best: &mut Best, flags: &mut TuneFlags) {
    let mut adam = Adam::new(params.len(), lr);
    let mut grad = vec![0.0; params.len()];
    for _ in 0..iters {
        let loss = obj.eval(batch, params, &mut grad);
        best.offer(loss, params);
        if !loss.is_finite() || !adam.step(params, &grad) {
            flags.non_finite_gradient = true;
            // restart from the best point so far
            params.copy_from_slice(&best.params);
            if !best.loss.is_finite() {
                return;
            }
            adam = Adam::new(params.len(), lr);
        }
    }
    let loss = obj.eval(batch, params, &mut grad);
    best.offer(loss, params);
}

fn bfgs_phase(obj: &mut Objective, batch: &PreparedBatch, iters: usize, best: &mut Best, flags: &mut TuneFlags) {
    if iters == 0 || !best.loss.is_finite() {
        return;
    }
    let mut x = best.params.clone();
    let mut g = vec![0.0; x.len()];
    let mut fx = obj.eval(batch, &x, &mut g);
    let mut bfgs = Bfgs::new(x.len());
    let mut f = |p: &[f64], g: &mut [f64]| obj.eval(batch, p, g);
    for _ in 0..iters {
        match bfgs.step(&mut x, &mut fx, &mut g, &mut f) {
            BfgsStatus::Progress => best.offer(fx, &x),
            BfgsStatus::Converged => break,
            BfgsStatus::LineSearchFailed => {
                flags.line_search_failed = true;
                break;
            }
            BfgsStatus::NonFinite => {
                flags.non_finite_gradient = true;
                break;
            }
        }
    }
}

/// `T1` Adam steps then `T2` BFGS steps on one batch; `expr` ends at the
/// best parameters seen. Eigen candidates get λ from the Rayleigh quotient
/// first; if that is impossible the candidate is scored +∞.
pub fn coarse_tune(expr: &mut Expression, problem: &PdeProblem, batch: &PreparedBatch, schedule: &Schedule) -> TuneOutcome {
    let mut flags = TuneFlags::default();
    if problem.is_eigen() && init_lambda(expr, &batch.interior).is_err() {
        flags.degenerate = true;
        return TuneOutcome {
            loss: f64::INFINITY,
            flags,
        };
    }
    let mut obj = Objective::new(problem, expr);
    let mut params = expr.params().to_vec();
    let mut best = Best::new(&params);
    adam_phase(&mut obj, batch, &mut params, schedule.t1, schedule.lr1, &mut best, &mut flags);
    bfgs_phase(&mut obj, batch, schedule.t2, &mut best, &mut flags);
    expr.set_params(&best.params);
    TuneOutcome { loss: best.loss, flags }
}

/// `T3` Adam steps on `batch` (used after regrouping).
pub fn medium_tune(expr: &mut Expression, problem: &PdeProblem, batch: &PreparedBatch, schedule: &Schedule) -> TuneOutcome {
    let mut flags = TuneFlags::default();
    let mut obj = Objective::new(problem, expr);
    let mut params = expr.params().to_vec();
    let mut best = Best::new(&params);
    adam_phase(&mut obj, batch, &mut params, schedule.t3, schedule.lr3, &mut best, &mut flags);
    expr.set_params(&best.params);
    TuneOutcome { loss: best.loss, flags }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
    pub best_loss: f64,
    pub relative_l2: Option<f64>,
    pub absolute_relative: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineOutcome {
    pub loss: f64,
    pub flags: TuneFlags,
    pub trace: Vec<TracePoint>,
}

/// Fine-tuning options that are not part of the schedule.
#[derive(Clone, Copy, Debug)]
pub struct FineOptions<'a> {
    pub n_interior: usize,
    pub n_boundary: usize,
    /// Record a trace row every this many iterations (and at the last one).
    pub trace_every: usize,
    /// Points on which error metrics are traced, if the problem has an
    /// exact solution.
    pub test_points: Option<&'a Points>,
}

/// `T4` Adam steps with a fresh batch per iteration, then an optional
/// BFGS polish on one more fresh batch. `expr` ends at the iterate with the
/// lowest batch loss.
pub fn fine_tune<R: Rng + ?Sized>(
    expr: &mut Expression,
    problem: &PdeProblem,
    schedule: &Schedule,
    options: FineOptions,
    rng: &mut R,
) -> Result<FineOutcome> {
    let mut flags = TuneFlags::default();
    let mut trace = Vec::new();
    if schedule.t4 == 0 && schedule.polish == 0 {
        return Ok(FineOutcome {
            loss: f64::NAN,
            flags,
            trace,
        });
    }
    let mut obj = Objective::new(problem, expr);
    let mut params = expr.params().to_vec();
    let mut best = Best::new(&params);
    let mut adam = Adam::new(params.len(), schedule.lr4);
    let mut grad = vec![0.0; params.len()];
    let every = options.trace_every.max(1);
    let record = |iteration: usize, loss: f64, best_loss: f64, params: &[f64], trace: &mut Vec<TracePoint>| {
        let mut snapshot = expr.clone();
        snapshot.set_params(params);
        let metrics = match (options.test_points, problem.exact) {
            (Some(pts), Some(_)) => problem.error_metrics(&snapshot, pts).ok(),
            _ => None,
        };
        trace.push(TracePoint {
            iteration,
            loss,
            best_loss,
            relative_l2: metrics.map(|m| m.relative_l2),
            absolute_relative: metrics.map(|m| m.absolute_relative),
            lambda: snapshot.lambda(),
        });
    };
    for it in 0..schedule.t4 {
        let batch = problem.sample(options.n_interior, options.n_boundary, rng)?;
        let loss = obj.eval(&batch, &params, &mut grad);
        best.offer(loss, &params);
        if it % every == 0 {
            record(it, loss, best.loss, &params, &mut trace);
        }
        if !loss.is_finite() || !adam.step(&mut params, &grad) {
            flags.non_finite_gradient = true;
            params.copy_from_slice(&best.params);
            adam = Adam::new(params.len(), schedule.lr4);
        }
    }
    if schedule.polish > 0 {
        let batch = problem.sample(options.n_interior, options.n_boundary, rng)?;
        let loss = obj.eval(&batch, &params, &mut grad);
        best.offer(loss, &params);
        // the polish batch differs from earlier ones, so restart the
        // comparison on it
        let start = if best.loss.is_finite() { best.params.clone() } else { params.clone() };
        let mut local = Best::new(&start);
        local.loss = obj.eval(&batch, &start, &mut grad);
        bfgs_phase(&mut obj, &batch, schedule.polish, &mut local, &mut flags);
        best = local;
        params.copy_from_slice(&best.params);
    }
    record(schedule.t4, best.loss, best.loss, &best.params, &mut trace);
    expr.set_params(&best.params);
    Ok(FineOutcome {
        loss: best.loss,
        flags,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{BinaryOp, CombinerOp, OperatorLibrary, OperatorSequence, TreeShape, UnaryKind, UnaryOp};
    use crate::geometry::Domain;
    use crate::problems::{ExactSolution, LossKind, Precision, Residual};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(c1: CombinerOp, u1: UnaryOp, c2: CombinerOp, u2: UnaryOp, root: BinaryOp) -> OperatorSequence {
        let l = OperatorLibrary::default();
        let ci = |c| l.combiners.iter().position(|x| *x == c).unwrap();
        let ui = |u| l.unary_index(u).unwrap();
        let bi = |b| l.binaries.iter().position(|x| *x == b).unwrap();
        OperatorSequence::new(vec![ci(c1), ui(u1), ci(c2), ui(u2), bi(root)])
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn quadratic_surrogate_reaches_target() {
        // 1-d, u = w·x + b + 0 fitted to u* = 3x via −Δu = 0 and boundary data
        // (the boundary of [−1,1] is {±1}, pinning w = 3, b = 0)
        let problem = PdeProblem {
            name: "line".into(),
            dim: 1,
            domain: Domain::Hypercube {
                center: vec![0.0],
                side: 2.0,
            },
            residual: Residual::Poisson,
            exact: Some(ExactSolution::SumSquares { scale: 0.0 }),
            loss_kind: LossKind::Standard,
            boundary_split: Default::default(),
            precision: Precision::Double,
        };
        let mut batch = problem.sample(8, 2, &mut rng(1)).unwrap();
        batch.target = batch.boundary.iter().map(|x| 3.0 * x[0]).collect();
        let mut e = Expression::build(
            TreeShape::default(),
            seq(
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Identity),
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Zero),
                BinaryOp::Add,
            ),
            &OperatorLibrary::default(),
            1,
            &mut rng(2),
        )
        .unwrap();
        let out = coarse_tune(&mut e, &problem, &batch, &Schedule::default());
        let w = e.weight_values(0)[0] * e.alpha_values(0)[0];
        assert!((w - 3.0).abs() <= 1e-8, "w·α = {w}, loss {}", out.loss);
    }

    #[test]
    fn pb_ex2_correct_sequence_coarse_tunes() {
        let problem = PdeProblem::pb_ex2(10);
        let batch = problem.sample(500, 500, &mut rng(3)).unwrap();
        // positive starting weights: a negative w on x² is pulled into the
        // α = 0 trap, where ∂/∂w vanishes
        let mut e = Expression::build_with(
            TreeShape::default(),
            seq(
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Square),
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Zero),
                BinaryOp::Add,
            ),
            &OperatorLibrary::default(),
            10,
            |_| 0.5,
        )
        .unwrap();
        let schedule = Schedule {
            t2: 200,
            ..Schedule::default()
        };
        let out = coarse_tune(&mut e, &problem, &batch, &schedule);
        assert!(out.loss < 1e-6, "loss {}", out.loss);
        // only w·α² is identified
        for i in 0..10 {
            let eff = e.weight_values(0)[i] * e.alpha_values(0)[i].powi(2);
            assert!((eff - 2.0).abs() < 1e-3, "{eff}");
            assert!((e.alpha_values(0)[i] - 1.0).abs() < 0.5);
        }
    }

    #[test]
    fn wrong_frequency_scores_worse() {
        let problem = PdeProblem::poisson2d_holes_a();
        let batch = problem.sample(400, 400, &mut rng(5)).unwrap();
        let sin = |k| UnaryOp::scaled(UnaryKind::Sin, k).unwrap();
        let schedule = Schedule {
            t2: 60,
            ..Schedule::default()
        };
        // best of four initializations, as repeated sampling would give
        let best_loss = |u| {
            (0..4)
                .map(|seed| {
                    let mut e = Expression::build(
                        TreeShape::default(),
                        seq(
                            CombinerOp::Product,
                            u,
                            CombinerOp::Sum,
                            UnaryOp::plain(UnaryKind::Zero),
                            BinaryOp::Add,
                        ),
                        &OperatorLibrary::default(),
                        2,
                        &mut rng(seed),
                    )
                    .unwrap();
                    coarse_tune(&mut e, &problem, &batch, &schedule).loss
                })
                .fold(f64::INFINITY, f64::min)
        };
        let lg = best_loss(sin(21));
        let lb = best_loss(sin(6));
        assert!(lg * 100.0 < lb, "good {lg} bad {lb}");
    }

    #[test]
    fn coarse_never_worse_than_start() {
        let problem = PdeProblem::poisson2d_holes_b();
        let batch = problem.sample(100, 100, &mut rng(7)).unwrap();
        let lib = OperatorLibrary::default();
        let mut r = rng(8);
        for _ in 0..5 {
            let ops: Vec<usize> = TreeShape::default()
                .slots()
                .iter()
                .map(|s| r.random_range(0..lib.len_for(s.kind())))
                .collect();
            let mut e = Expression::build(TreeShape::default(), OperatorSequence::new(ops), &lib, 2, &mut r).unwrap();
            let start = problem.loss(&e, &batch).unwrap().total;
            let out = coarse_tune(&mut e, &problem, &batch, &Schedule::default());
            assert!(out.loss <= start);
            let after = problem.loss(&e, &batch).unwrap().total;
            assert_eq!(after, out.loss);
        }
    }

    #[test]
    fn eigen_degenerate_candidate_is_poisoned() {
        let problem = PdeProblem::laplace_eigen(2);
        let batch = problem.sample(50, 50, &mut rng(9)).unwrap();
        let mut e = Expression::build_with(
            TreeShape::default(),
            seq(
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::One),
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Zero),
                BinaryOp::Add,
            ),
            &OperatorLibrary::default(),
            2,
            |_| 0.3,
        )
        .unwrap();
        let out = coarse_tune(&mut e, &problem, &batch, &Schedule::default());
        assert!(out.flags.degenerate && out.loss.is_infinite());
    }

    #[test]
    fn zero_iteration_fine_tune_is_identity() {
        let problem = PdeProblem::pb_ex2(2);
        let mut e = Expression::build(
            TreeShape::default(),
            OperatorSequence::new(vec![0, 3, 0, 2, 0]),
            &OperatorLibrary::default(),
            2,
            &mut rng(1),
        )
        .unwrap();
        let before = e.clone();
        let schedule = Schedule {
            t4: 0,
            ..Schedule::default()
        };
        let opts = FineOptions {
            n_interior: 10,
            n_boundary: 10,
            trace_every: 1,
            test_points: None,
        };
        let out = fine_tune(&mut e, &problem, &schedule, opts, &mut rng(2)).unwrap();
        assert_eq!(e, before);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn fine_trace_best_is_non_increasing() {
        let problem = PdeProblem::pb_ex2(3);
        let mut e = Expression::build(
            TreeShape::default(),
            seq(
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Square),
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Cos),
                BinaryOp::Add,
            ),
            &OperatorLibrary::default(),
            3,
            &mut rng(3),
        )
        .unwrap();
        let pts = problem.domain.sample_interior(200, &mut rng(4)).unwrap();
        let schedule = Schedule {
            t4: 300,
            lr4: 1e-2,
            ..Schedule::default()
        };
        let opts = FineOptions {
            n_interior: 64,
            n_boundary: 64,
            trace_every: 1,
            test_points: Some(&pts),
        };
        let out = fine_tune(&mut e, &problem, &schedule, opts, &mut rng(5)).unwrap();
        assert_eq!(out.trace.len(), 301);
        for w in out.trace.windows(2) {
            assert!(w[1].best_loss <= w[0].best_loss);
        }
        assert!(out.trace.iter().all(|t| t.relative_l2.is_some()));
        assert!(out.trace.last().unwrap().best_loss < out.trace[0].loss);
    }
}
