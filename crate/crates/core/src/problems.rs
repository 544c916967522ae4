//! Benchmark PDEs, the collocation loss and error metrics.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::expr::{Adjoint, Expression};
use crate::geometry::{BoundarySplit, Domain, Hole, Points, SampleBatch};

/// Beyond this |u| the `sinh` term is treated as overflowed.
pub const SINH_LIMIT: f64 = 700.0;

/// Geometry seed used by the benchmark presets for randomly sized holes.
pub const DEFAULT_GEOMETRY_SEED: u64 = 2024;

/// Reference error levels for each benchmark, reported by `reproduce` as
/// targets to compare against. Relative L² error, except `pb_ex1_100d`
/// (absolute relative error).
pub const REFERENCE_TARGETS: [(&str, f64); 7] = [
    ("pb_ex1_100d", 1e-6),
    ("pb_ex2_10d", 3.3e-6),
    ("poisson2d_holes_a", 4.9e-7),
    ("poisson2d_holes_b", 8.6e-7),
    ("poisson3d_product", 4.1e-14),
    ("poisson3d_exp", 3.2e-15),
    ("laplace_eigen_10d", 3e-3),
];

pub fn reference_target(id: &str) -> Option<f64> {
    REFERENCE_TARGETS.iter().find(|(k, _)| *k == id).map(|(_, v)| *v)
}

pub const BENCHMARK_IDS: [&str; 7] = [
    "pb_ex1_100d",
    "pb_ex2_10d",
    "poisson2d_holes_a",
    "poisson2d_holes_b",
    "poisson3d_product",
    "poisson3d_exp",
    "laplace_eigen_10d",
];

/// The differential operator, written so that `D(u) = op(u) − f`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Residual {
    /// `−Δu = f`
    Poisson,
    /// `Δu + c·u = f`
    PoissonLinear { c: f64 },
    /// `−Δu + sinh(u) = f`
    PoissonSinh,
    /// `Δu + λu = 0`
    Eigen,
}

impl Residual {
    /// `op(u)` from the value and Laplacian. `λ` is only read by `Eigen`.
    pub fn apply(&self, value: f64, laplacian: f64, lambda: f64) -> f64 {
        match *self {
            Residual::Poisson => -laplacian,
            Residual::PoissonLinear { c } => laplacian + c * value,
            Residual::PoissonSinh => {
                if value.abs() > SINH_LIMIT {
                    f64::INFINITY
                } else {
                    -laplacian + value.sinh()
                }
            }
            Residual::Eigen => laplacian + lambda * value,
        }
    }

    /// `(∂op/∂u, ∂op/∂Δu, ∂op/∂λ)`.
    pub fn partials(&self, value: f64, lambda: f64) -> (f64, f64, f64) {
        match *self {
            Residual::Poisson => (0.0, -1.0, 0.0),
            Residual::PoissonLinear { c } => (c, 1.0, 0.0),
            Residual::PoissonSinh => (value.cosh(), -1.0, 0.0),
            Residual::Eigen => (lambda, 1.0, value),
        }
    }
}

/// Closed-form reference solutions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExactSolution {
    /// `Σ cos(ω xᵢ)`
    SumCos { omega: f64 },
    /// `s Σ xᵢ²`
    SumSquares { scale: f64 },
    /// `Π sin(μ xᵢ)`
    ProductSin { mu: f64 },
    /// `exp(Σ sin(μ xᵢ))`
    ExpSumSin { mu: f64 },
}

impl ExactSolution {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_laplacian(x).0
    }

    pub fn value_laplacian(&self, x: &[f64]) -> (f64, f64) {
        let d = x.len() as f64;
        match *self {
            ExactSolution::SumCos { omega } => {
                let v: f64 = x.iter().map(|xi| (omega * xi).cos()).sum();
                (v, -omega * omega * v)
            }
            ExactSolution::SumSquares { scale } => {
                let v: f64 = scale * x.iter().map(|xi| xi * xi).sum::<f64>();
                (v, 2.0 * scale * d)
            }
            ExactSolution::ProductSin { mu } => {
                let v: f64 = x.iter().map(|xi| (mu * xi).sin()).product();
                (v, -d * mu * mu * v)
            }
            ExactSolution::ExpSumSin { mu } => {
                let (mut s, mut c2) = (0.0, 0.0);
                for xi in x {
                    let (sn, cs) = (mu * xi).sin_cos();
                    s += sn;
                    c2 += cs * cs;
                }
                let v = s.exp();
                (v, mu * mu * v * (c2 - s))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Standard,
    /// Boundary and normalization terms weighted by `alpha_b`, `alpha_n`;
    /// normalization is `min_i (|ũ(xᵢ)|^p − c)²`.
    Eigenvalue { alpha_b: f64, alpha_n: f64, p: f64, c: f64 },
}

impl LossKind {
    pub fn is_eigen(&self) -> bool {
        matches!(self, LossKind::Eigenvalue { .. })
    }

    fn alpha_b(&self) -> f64 {
        match *self {
            LossKind::Standard => 1.0,
            LossKind::Eigenvalue { alpha_b, .. } => alpha_b,
        }
    }

    fn alpha_n(&self) -> f64 {
        match *self {
            LossKind::Standard => 1.0,
            LossKind::Eigenvalue { alpha_n, .. } => alpha_n,
        }
    }
}

/// Arithmetic used when evaluating the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    /// Points and evaluated quantities rounded through `f32`.
    Single,
}

impl Precision {
    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::Double => v,
            Precision::Single => v as f32 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeProblem {
    pub name: String,
    pub dim: usize,
    pub domain: Domain,
    pub residual: Residual,
    /// Also supplies the Dirichlet data `g` and the source `f`; without it
    /// both are zero.
    pub exact: Option<ExactSolution>,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub boundary_split: BoundarySplit,
    #[serde(default)]
    pub precision: Precision,
}

/// Collocation points with the source and boundary data precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub interior: Points,
    pub boundary: Points,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub boundary_strata: Vec<(String, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub interior: f64,
    pub boundary: f64,
    pub normalization: f64,
    pub n_interior: usize,
    pub n_boundary: usize,
    /// False when some evaluated quantity overflowed; `total` is then +∞.
    pub finite: bool,
}

impl LossReport {
    fn poisoned(n_interior: usize, n_boundary: usize) -> Self {
        LossReport {
            total: f64::INFINITY,
            interior: f64::INFINITY,
            boundary: f64::INFINITY,
            normalization: f64::INFINITY,
            n_interior,
            n_boundary,
            finite: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub relative_l2: f64,
    pub absolute_relative: f64,
}

impl PdeProblem {
    pub fn is_eigen(&self) -> bool {
        self.loss_kind.is_eigen()
    }

    /// Dirichlet data; zero for the eigenproblem or without an exact solution.
    pub fn boundary_value(&self, x: &[f64]) -> f64 {
        match (&self.exact, self.residual) {
            (_, Residual::Eigen) | (None, _) => 0.0,
            (Some(u), _) => u.value(x),
        }
    }

    /// Right-hand side `f = op(u*)`.
    pub fn source(&self, x: &[f64]) -> f64 {
        match (&self.exact, self.residual) {
            (_, Residual::Eigen) | (None, _) => 0.0,
            (Some(u), r) => {
                let (v, lap) = u.value_laplacian(x);
                r.apply(v, lap, 0.0)
            }
        }
    }

    pub fn prepare(&self, batch: SampleBatch) -> PreparedBatch {
        let SampleBatch {
            mut interior,
            mut boundary,
            boundary_strata,
        } = batch;
        if self.precision == Precision::Single {
            interior.round_to_f32();
            boundary.round_to_f32();
        }
        let source = interior.iter().map(|x| self.precision.round(self.source(x))).collect();
        let target = boundary.iter().map(|x| self.precision.round(self.boundary_value(x))).collect();
        PreparedBatch {
            interior,
            boundary,
            source,
            target,
            boundary_strata,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_interior: usize, n_boundary: usize, rng: &mut R) -> Result<PreparedBatch> {
        let batch = self.domain.sample_batch(n_interior, n_boundary, self.boundary_split, rng)?;
        Ok(self.prepare(batch))
    }

    fn check(&self, expr: &Expression) -> Result<()> {
        if expr.dim() != self.dim {
            return Err(FexError::DimensionMismatch {
                expected: self.dim,
                got: expr.dim(),
            });
        }
        if self.is_eigen() && expr.lambda().is_none() {
            return Err(FexError::InvalidShape("eigenvalue loss needs λ in the parameters".into()));
        }
        Ok(())
    }

    pub fn loss(&self, expr: &Expression, batch: &PreparedBatch) -> Result<LossReport> {
        self.check(expr)?;
        Ok(self.evaluate(expr, batch, None))
    }

    /// Loss plus its gradient with respect to every expression parameter
    /// (written into `grad`, which is overwritten). On a non-finite loss the
    /// gradient content is unspecified.
    pub fn loss_grad(&self, expr: &Expression, batch: &PreparedBatch, grad: &mut [f64]) -> Result<LossReport> {
        self.check(expr)?;
        assert_eq!(grad.len(), expr.num_params());
        Ok(self.evaluate(expr, batch, Some(grad)))
    }

    fn evaluate(&self, expr: &Expression, batch: &PreparedBatch, mut grad: Option<&mut [f64]>) -> LossReport {
        let n = batch.interior.len();
        let m = batch.boundary.len();
        let prec = self.precision;
        let lambda = expr.lambda().map(|l| prec.round(l)).unwrap_or(0.0);
        let mut ws = expr.workspace();
        let mut adj = Adjoint::zeros(expr.dim());
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut lambda_grad = 0.0;

        // interior residual
        let mut interior = 0.0;
        let mut norm_best = (f64::INFINITY, usize::MAX, 0.0);
        let (p, c) = match self.loss_kind {
            LossKind::Eigenvalue { p, c, .. } => (p, c),
            LossKind::Standard => (1.0, 0.0),
        };
        for (i, x) in batch.interior.iter().enumerate() {
            let jet = expr.forward(x, &mut ws);
            let v = prec.round(jet.value);
            let lap = prec.round(jet.laplacian);
            let d = prec.round(self.residual.apply(v, lap, lambda) - batch.source[i]);
            if !d.is_finite() || !v.is_finite() {
                return LossReport::poisoned(n, m);
            }
            interior += d * d;
            if self.is_eigen() {
                let pen = (v.abs().powf(p) - c).powi(2);
                if pen < norm_best.0 {
                    norm_best = (pen, i, v);
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let (dv, dl, dlam) = self.residual.partials(v, lambda);
                let s = 2.0 * d / n as f64;
                adj.value = s * dv;
                adj.laplacian = s * dl;
                expr.backward(x, &mut ws, &adj, g);
                lambda_grad += s * dlam;
            }
        }
        interior /= n as f64;

        // boundary misfit
        let alpha_b = self.loss_kind.alpha_b();
        let mut boundary = 0.0;
        adj.laplacian = 0.0;
        for (j, x) in batch.boundary.iter().enumerate() {
            let r = if grad.is_some() {
                prec.round(expr.forward(x, &mut ws).value) - batch.target[j]
            } else {
                prec.round(expr.value_at(x)) - batch.target[j]
            };
            if !r.is_finite() {
                return LossReport::poisoned(n, m);
            }
            boundary += r * r;
            if let Some(g) = grad.as_deref_mut() {
                adj.value = 2.0 * alpha_b * r / m as f64;
                expr.backward(x, &mut ws, &adj, g);
            }
        }
        boundary /= m as f64;

        // min-based normalization, subgradient at the minimizing point
        let alpha_n = self.loss_kind.alpha_n();
        let normalization = if self.is_eigen() { norm_best.0 } else { 0.0 };
        if self.is_eigen() {
            if let Some(g) = grad.as_deref_mut() {
                let (_, i, v) = norm_best;
                let a = v.abs();
                let dv = if a > 0.0 {
                    2.0 * (a.powf(p) - c) * p * a.powf(p - 1.0) * v.signum()
                } else {
                    0.0
                };
                let x = batch.interior.get(i);
                expr.forward(x, &mut ws);
                adj.value = alpha_n * dv;
                expr.backward(x, &mut ws, &adj, g);
            }
        }

        if let (Some(g), Some(li)) = (grad, expr.lambda_index()) {
            g[li] = lambda_grad;
        }
        let total = interior + alpha_b * boundary + alpha_n * normalization;
        if !total.is_finite() {
            return LossReport::poisoned(n, m);
        }
        LossReport {
            total,
            interior,
            boundary,
            normalization,
            n_interior: n,
            n_boundary: m,
            finite: true,
        }
    }

    /// Error metrics against the exact solution on `points`. For the
    /// eigenproblem the candidate is first rescaled by the least-squares
    /// optimal factor, since eigenfunctions are only defined up to scale.
    pub fn error_metrics(&self, expr: &Expression, points: &Points) -> Result<ErrorMetrics> {
        let pred: Vec<f64> = points.iter().map(|x| expr.value_at(x)).collect();
        self.metrics_for_values(pred, points)
    }

    /// As [`PdeProblem::error_metrics`] for predictions already evaluated at
    /// `points`.
    pub fn metrics_for_values(&self, mut pred: Vec<f64>, points: &Points) -> Result<ErrorMetrics> {
        let exact = self
            .exact
            .ok_or_else(|| FexError::Metrics("problem has no exact solution".into()))?;
        let truth: Vec<f64> = points.iter().map(|x| exact.value(x)).collect();
        if self.is_eigen() {
            let num: f64 = pred.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let den: f64 = pred.iter().map(|a| a * a).sum();
            if den > 0.0 {
                pred.iter_mut().for_each(|a| *a *= num / den);
            }
        }
        metrics_from_values(&pred, &truth)
    }

    /// Metrics over a fresh interior batch drawn from its own seed.
    pub fn sampled_error_metrics(&self, expr: &Expression, n: usize, seed: u64) -> Result<ErrorMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = self.domain.sample_interior(n, &mut rng)?;
        self.error_metrics(expr, &points)
    }

    /// The reference eigenvalue, when known.
    pub fn exact_eigenvalue(&self) -> Option<f64> {
        match (self.residual, self.exact) {
            (Residual::Eigen, Some(ExactSolution::ProductSin { mu })) => Some(self.dim as f64 * mu * mu),
            _ => None,
        }
    }
}

pub fn metrics_from_values(pred: &[f64], truth: &[f64]) -> Result<ErrorMetrics> {
    assert_eq!(pred.len(), truth.len());
    let (mut d2, mut u2, mut d1, mut u1) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(truth) {
        let e = a - b;
        d2 += e * e;
        u2 += b * b;
        d1 += e.abs();
        u1 += b.abs();
    }
    if u1 == 0.0 {
        return Err(FexError::Metrics("exact solution vanishes on the test batch".into()));
    }
    Ok(ErrorMetrics {
        relative_l2: (d2 / u2).sqrt(),
        absolute_relative: d1 / u1,
    })
}

/// Rayleigh-quotient starting value `mean|∇ũ|² / mean ũ²` over `points`.
pub fn rayleigh_init(expr: &Expression, points: &Points) -> Result<f64> {
    let mut ws = expr.workspace();
    let (mut num, mut den) = (0.0, 0.0);
    for x in points.iter() {
        let jet = expr.forward(x, &mut ws);
        num += jet.grad.iter().map(|g| g * g).sum::<f64>();
        den += jet.value * jet.value;
    }
    let n = points.len().max(1) as f64;
    let (num, den) = (num / n, den / n);
    if !(num.is_finite() && den.is_finite()) {
        return Err(FexError::DegenerateCandidate("non-finite Rayleigh quotient".into()));
    }
    if den < 1e-12 {
        return Err(FexError::DegenerateCandidate("candidate vanishes on the batch".into()));
    }
    if num < 1e-12 * den {
        return Err(FexError::DegenerateCandidate("candidate has zero gradient".into()));
    }
    Ok(num / den)
}

impl PdeProblem {
    /// `Δu − u = −5·Σcos(2xᵢ)` in the unit ball, Dirichlet data on the sphere.
    pub fn pb_ex1(dim: usize) -> Self {
        PdeProblem {
            name: format!("pb_ex1_{dim}d"),
            dim,
            domain: Domain::Ball {
                center: vec![0.0; dim],
                radius: 1.0,
            },
            residual: Residual::PoissonLinear { c: -1.0 },
            exact: Some(ExactSolution::SumCos { omega: 2.0 }),
            loss_kind: LossKind::Standard,
            boundary_split: BoundarySplit::default(),
            precision: Precision::Double,
        }
    }

    /// `−Δu + sinh u = f` in the unit ball with `u = 2Σxᵢ²`.
    pub fn pb_ex2(dim: usize) -> Self {
        PdeProblem {
            name: format!("pb_ex2_{dim}d"),
            dim,
            domain: Domain::Ball {
                center: vec![0.0; dim],
                radius: 1.0,
            },
            residual: Residual::PoissonSinh,
            exact: Some(ExactSolution::SumSquares { scale: 2.0 }),
            loss_kind: LossKind::Standard,
            boundary_split: BoundarySplit::default(),
            precision: Precision::Double,
        }
    }

    fn poisson2d(name: &str, holes: Vec<Hole>) -> Self {
        PdeProblem {
            name: name.into(),
            dim: 2,
            domain: Domain::PerforatedBox {
                center: vec![0.0, 0.0],
                side: 2.0,
                holes,
            },
            residual: Residual::Poisson,
            exact: Some(ExactSolution::ProductSin { mu: 7.0 * PI }),
            loss_kind: LossKind::Standard,
            boundary_split: BoundarySplit::default(),
            precision: Precision::Double,
        }
    }

    /// Square `[−1,1]²` with three circular holes.
    pub fn poisson2d_holes_a() -> Self {
        let circle = |c: [f64; 2], r: f64| Hole::Circle {
            center: c.to_vec(),
            radius: r,
        };
        PdeProblem::poisson2d(
            "poisson2d_holes_a",
            vec![
                circle([-0.5, 0.5], 0.1),
                circle([0.5, 0.5], 0.2),
                circle([0.5, -0.5], 0.2),
            ],
        )
    }

    /// Square `[−1,1]²` with three circles and one ellipse.
    pub fn poisson2d_holes_b() -> Self {
        let circle = |c: [f64; 2], r: f64| Hole::Circle {
            center: c.to_vec(),
            radius: r,
        };
        PdeProblem::poisson2d(
            "poisson2d_holes_b",
            vec![
                circle([-0.6, -0.6], 0.3),
                circle([0.3, -0.3], 0.6),
                circle([0.6, 0.6], 0.3),
                Hole::Ellipse {
                    center: vec![-0.5, 0.5],
                    semi_axes: vec![0.25, 0.125],
                },
            ],
        )
    }

    fn poisson3d(name: &str, exact: ExactSolution, geometry_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed);
        let domain = Domain::with_grid_holes(vec![0.0; 3], 2.0, 5, (0.04, 0.12), &mut rng)?;
        Ok(PdeProblem {
            name: name.into(),
            dim: 3,
            domain,
            residual: Residual::Poisson,
            exact: Some(exact),
            loss_kind: LossKind::Standard,
            boundary_split: BoundarySplit::default(),
            precision: Precision::Double,
        })
    }

    /// `Δu + λu = 0` with zero Dirichlet data on the unit cube `[0,1]ᵈ`.
    pub fn laplace_eigen(dim: usize) -> Self {
        PdeProblem {
            name: format!("laplace_eigen_{dim}d"),
            dim,
            domain: Domain::unit_cube(dim),
            residual: Residual::Eigen,
            exact: Some(ExactSolution::ProductSin { mu: PI }),
            loss_kind: LossKind::Eigenvalue {
                alpha_b: 100.0,
                alpha_n: 100.0,
                p: 1.0,
                c: 1.0,
            },
            boundary_split: BoundarySplit::default(),
            precision: Precision::Double,
        }
    }
}

pub fn make_benchmark(name: &str) -> Result<PdeProblem> {
    make_benchmark_with_seed(name, DEFAULT_GEOMETRY_SEED)
}

/// As [`make_benchmark`], with an explicit seed for the random hole radii.
pub fn make_benchmark_with_seed(name: &str, geometry_seed: u64) -> Result<PdeProblem> {
    let mu = 7.0 * PI;
    match name {
        "pb_ex1_100d" => Ok(PdeProblem::pb_ex1(100)),
        "pb_ex2_10d" => Ok(PdeProblem::pb_ex2(10)),
        "poisson2d_holes_a" => Ok(PdeProblem::poisson2d_holes_a()),
        "poisson2d_holes_b" => Ok(PdeProblem::poisson2d_holes_b()),
        "poisson3d_product" => PdeProblem::poisson3d(name, ExactSolution::ProductSin { mu }, geometry_seed),
        "poisson3d_exp" => PdeProblem::poisson3d(name, ExactSolution::ExpSumSin { mu }, geometry_seed),
        "laplace_eigen_10d" => Ok(PdeProblem::laplace_eigen(10)),
        other => Err(FexError::UnknownBenchmark(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{BinaryOp, CombinerOp, OperatorLibrary, OperatorSequence, TreeShape, UnaryKind, UnaryOp};

    fn lib() -> OperatorLibrary {
        OperatorLibrary::default()
    }

    fn seq(c1: CombinerOp, u1: UnaryOp, c2: CombinerOp, u2: UnaryOp, root: BinaryOp) -> OperatorSequence {
        let l = lib();
        let ci = |c| l.combiners.iter().position(|x| *x == c).unwrap();
        let ui = |u| l.unary_index(u).unwrap();
        let bi = |b| l.binaries.iter().position(|x| *x == b).unwrap();
        OperatorSequence::new(vec![ci(c1), ui(u1), ci(c2), ui(u2), bi(root)])
    }

    /// Σ w·cos(α·x) + 0 with w = 1, α = 2, second leaf zero.
    fn pb_ex1_exact(dim: usize) -> Expression {
        let mut e = Expression::build_with(
            TreeShape::default(),
            seq(
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Cos),
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Zero),
                BinaryOp::Add,
            ),
            &lib(),
            dim,
            |_| 0.0,
        )
        .unwrap();
        for i in 0..dim {
            e.set_weight(0, i, 1.0);
            e.set_alpha(0, i, 2.0);
        }
        e
    }

    fn sine_product(dim: usize, freq: f64, eigen: bool) -> Expression {
        let mut e = Expression::build_with(
            TreeShape::default(),
            seq(
                CombinerOp::Product,
                UnaryOp::plain(UnaryKind::Sin),
                CombinerOp::Sum,
                UnaryOp::plain(UnaryKind::Zero),
                BinaryOp::Add,
            ),
            &lib(),
            dim,
            |_| 0.0,
        )
        .unwrap();
        e.set_weight(0, 0, 1.0);
        for i in 0..dim {
            e.set_alpha(0, i, freq);
        }
        if eigen {
            e.set_lambda(0.0);
        }
        e
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn exact_laplacians_match_finite_differences() {
        let sols = [
            ExactSolution::SumCos { omega: 2.0 },
            ExactSolution::SumSquares { scale: 2.0 },
            ExactSolution::ProductSin { mu: 3.0 },
            ExactSolution::ExpSumSin { mu: 2.0 },
        ];
        let x = [0.3, -0.2, 0.45];
        let h = 1e-4;
        for s in sols {
            let (v, lap) = s.value_laplacian(&x);
            let mut fd = 0.0;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                fd += (s.value(&xp) - 2.0 * v + s.value(&xm)) / (h * h);
            }
            assert!((fd - lap).abs() <= 1e-5 * (1.0 + lap.abs()), "{s:?}: {fd} vs {lap}");
        }
    }

    #[test]
    fn pb_ex1_source_at_origin() {
        let p = make_benchmark("pb_ex1_100d").unwrap();
        assert_eq!(p.source(&vec![0.0; 100]), -500.0);
        let x = vec![0.01; 100];
        assert!((p.residual.apply(2.0, 3.0, 0.0) - (3.0 - 2.0)).abs() < 1e-15);
        let u = ExactSolution::SumCos { omega: 2.0 }.value(&x);
        assert!((p.source(&x) + 5.0 * u).abs() < 1e-10);
    }

    #[test]
    fn exact_solution_has_zero_loss() {
        let p = PdeProblem::pb_ex1(20);
        let batch = p.sample(200, 200, &mut rng(1)).unwrap();
        let r = p.loss(&pb_ex1_exact(20), &batch).unwrap();
        assert!(r.total <= 1e-20, "{r:?}");
        assert!(r.finite);
    }

    #[test]
    fn zero_candidate_pays_normalization() {
        let p = PdeProblem::laplace_eigen(3);
        let mut e = sine_product(3, 1.0, true);
        e.set_weight(0, 0, 0.0);
        let batch = p.sample(64, 64, &mut rng(2)).unwrap();
        let r = p.loss(&e, &batch).unwrap();
        assert_eq!(r.normalization, 1.0);
        assert_eq!(r.total, 100.0);
    }

    #[test]
    fn normalization_vanishes_when_a_point_hits_c() {
        let p = PdeProblem::laplace_eigen(1);
        let e = sine_product(1, PI, true);
        let mut batch = p.sample(8, 2, &mut rng(3)).unwrap();
        batch.interior = Points::from_rows(1, &[vec![0.5], vec![0.2]]);
        batch.source = vec![0.0, 0.0];
        let r = p.loss(&e, &batch).unwrap();
        assert_eq!(r.normalization, 0.0);
    }

    #[test]
    fn loss_matches_resummation_oracle() {
        use crate::expr::Expression;
        let l = lib();
        let mut r = rng(4);
        for (k, problem) in [PdeProblem::pb_ex2(3), PdeProblem::poisson2d_holes_a(), PdeProblem::laplace_eigen(2)]
            .into_iter()
            .enumerate()
        {
            let batch = problem.sample(16, 16, &mut r).unwrap();
            for trial in 0..10 {
                let ops: Vec<usize> = TreeShape::default()
                    .slots()
                    .iter()
                    .map(|s| r.random_range(0..l.len_for(s.kind())))
                    .collect();
                let mut e = Expression::build(TreeShape::default(), OperatorSequence::new(ops), &l, problem.dim, &mut r)
                    .unwrap();
                if problem.is_eigen() {
                    e.set_lambda(3.0);
                }
                let report = problem.loss(&e, &batch).unwrap();
                if !report.finite {
                    continue;
                }
                // independent re-summation straight from the definitions
                let u = problem.exact.unwrap();
                let resid = |x: &[f64]| -> f64 {
                    let j = e.jet(x);
                    match problem.residual {
                        Residual::PoissonSinh => {
                            let (v, lap) = u.value_laplacian(x);
                            (-j.laplacian + j.value.sinh()) - (-lap + v.sinh())
                        }
                        Residual::Poisson => -j.laplacian - (-u.value_laplacian(x).1),
                        Residual::Eigen => j.laplacian + 3.0 * j.value,
                        Residual::PoissonLinear { .. } => unreachable!(),
                    }
                };
                let int: Vec<f64> = batch.interior.iter().map(|x| resid(x).powi(2)).collect();
                let bnd: Vec<f64> = batch
                    .boundary
                    .iter()
                    .map(|x| {
                        let g = if problem.is_eigen() { 0.0 } else { u.value(x) };
                        (e.eval(x) - g).powi(2)
                    })
                    .collect();
                let mut expected = int.iter().sum::<f64>() / 16.0;
                if problem.is_eigen() {
                    let norm = batch
                        .interior
                        .iter()
                        .map(|x| (e.eval(x).abs() - 1.0).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    expected += 100.0 * bnd.iter().sum::<f64>() / 16.0 + 100.0 * norm;
                } else {
                    expected += bnd.iter().sum::<f64>() / 16.0;
                }
                assert!(
                    (report.total - expected).abs() <= 1e-12 * expected.abs().max(1e-300),
                    "problem {k} trial {trial}: {} vs {expected}",
                    report.total
                );
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let l = lib();
        let mut r = rng(5);
        for problem in [PdeProblem::pb_ex2(3), PdeProblem::poisson2d_holes_b(), PdeProblem::laplace_eigen(2)] {
            let batch = problem.sample(12, 12, &mut r).unwrap();
            let mut checked = 0;
            while checked < 5 {
                let ops: Vec<usize> = TreeShape::default()
                    .slots()
                    .iter()
                    .map(|s| r.random_range(0..l.len_for(s.kind())))
                    .collect();
                let mut e = Expression::build(TreeShape::default(), OperatorSequence::new(ops), &l, problem.dim, &mut r)
                    .unwrap();
                for k in 0..e.num_params() {
                    e.params_mut()[k] *= r.random_range(0.5..1.0);
                }
                if problem.is_eigen() {
                    e.set_lambda(2.5);
                }
                let mut g = vec![0.0; e.num_params()];
                let rep = problem.loss_grad(&e, &batch, &mut g).unwrap();
                if !rep.finite || rep.total > 1e8 {
                    continue;
                }
                checked += 1;
                for k in 0..e.num_params() {
                    let h = 1e-6 * (1.0 + e.params()[k].abs());
                    let mut ep = e.clone();
                    ep.params_mut()[k] += h;
                    let mut em = e.clone();
                    em.params_mut()[k] -= h;
                    let fd = (problem.loss(&ep, &batch).unwrap().total - problem.loss(&em, &batch).unwrap().total)
                        / (2.0 * h);
                    let scale = 1.0 + g[k].abs().max(rep.total);
                    assert!((fd - g[k]).abs() <= 1e-5 * scale, "{}: param {k}: fd {fd} vs {}", problem.name, g[k]);
                }
            }
        }
    }

    #[test]
    fn rayleigh_of_sine_product() {
        let p = PdeProblem::laplace_eigen(4);
        let pts = p.domain.sample_interior(10_000, &mut rng(6)).unwrap();
        let l0 = rayleigh_init(&sine_product(4, PI, false), &pts).unwrap();
        assert!((l0 / (4.0 * PI * PI) - 1.0).abs() < 0.02, "{l0}");
    }

    #[test]
    fn rayleigh_rejects_constants() {
        let mut e = sine_product(2, 1.0, false);
        e.set_weight(0, 0, 0.0);
        e.set_bias(0, 0.7);
        let pts = Domain::unit_cube(2).sample_interior(100, &mut rng(7)).unwrap();
        assert!(matches!(rayleigh_init(&e, &pts), Err(FexError::DegenerateCandidate(_))));
        e.set_bias(0, 0.0);
        assert!(matches!(rayleigh_init(&e, &pts), Err(FexError::DegenerateCandidate(_))));
    }

    #[test]
    fn metrics_examples() {
        let u = [1.0, -2.0, 0.5];
        assert_eq!(
            metrics_from_values(&u, &u).unwrap(),
            ErrorMetrics {
                relative_l2: 0.0,
                absolute_relative: 0.0
            }
        );
        let twice: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let m = metrics_from_values(&twice, &u).unwrap();
        assert!((m.relative_l2 - 1.0).abs() < 1e-15 && (m.absolute_relative - 1.0).abs() < 1e-15);
        // ũ = u + ε: ‖ε‖₂/‖u‖₂ = ε√3/√5.25, Σ|ε|/Σ|u| = 3ε/3.5
        let eps = 1e-3;
        let shifted: Vec<f64> = u.iter().map(|v| v + eps).collect();
        let m = metrics_from_values(&shifted, &u).unwrap();
        assert!((m.relative_l2 - eps * (3.0f64 / 5.25).sqrt()).abs() < 1e-15);
        assert!((m.absolute_relative - 3.0 * eps / 3.5).abs() < 1e-15);
        assert!(metrics_from_values(&u, &[0.0; 3]).is_err());
    }

    #[test]
    fn eigen_metrics_ignore_scale() {
        let p = PdeProblem::laplace_eigen(2);
        let mut e = sine_product(2, PI, true);
        e.set_weight(0, 0, -3.0);
        let m = p.sampled_error_metrics(&e, 1000, 1).unwrap();
        assert!(m.relative_l2 < 1e-14);
    }

    #[test]
    fn benchmark_catalog() {
        for id in BENCHMARK_IDS {
            let p = make_benchmark(id).unwrap();
            assert_eq!(p.domain.dim(), p.dim);
            p.domain.validate().unwrap();
        }
        assert!(matches!(make_benchmark("nope"), Err(FexError::UnknownBenchmark(_))));
        let b = make_benchmark("poisson2d_holes_b").unwrap();
        assert!(!b.domain.contains(&[-0.5 + 1e-3, 0.5 + 1e-3]));
        let eig = make_benchmark("laplace_eigen_10d").unwrap();
        let (pts, _) = eig.domain.sample_boundary(100, BoundarySplit::default(), &mut rng(1)).unwrap();
        assert!(pts.iter().all(|x| eig.boundary_value(x) == 0.0));
        assert!((eig.exact_eigenvalue().unwrap() - 98.696).abs() < 1e-3);
    }

    #[test]
    fn sinh_overflow_poisons() {
        let p = PdeProblem::pb_ex2(2);
        let mut e = sine_product(2, 1.0, false);
        e.set_bias(1, 800.0);
        let batch = p.sample(4, 4, &mut rng(8)).unwrap();
        let r = p.loss(&e, &batch).unwrap();
        assert!(!r.finite && r.total.is_infinite());
    }

    #[test]
    fn linear_residual_scales_quadratically() {
        let p = PdeProblem {
            exact: None,
            ..PdeProblem::poisson2d_holes_a()
        };
        let batch = p.sample(32, 32, &mut rng(9)).unwrap();
        let e = sine_product(2, 5.0, false);
        let mut e3 = e.clone();
        e3.set_weight(0, 0, 3.0);
        let a = p.loss(&e, &batch).unwrap();
        let b = p.loss(&e3, &batch).unwrap();
        assert!((b.interior - 9.0 * a.interior).abs() <= 1e-12 * b.interior);
    }
}
