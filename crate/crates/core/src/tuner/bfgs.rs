//! Dense BFGS with a line search satisfying the strong Wolfe conditions.

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET: usize = 25;
const MAX_ZOOM: usize = 30;
/// Consecutive steps with negligible relative decrease before stopping.
const STALL_LIMIT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfgsStatus {
    /// A step was accepted.
    Progress,
    /// The gradient vanished or the objective stopped decreasing.
    Converged,
    /// No step length satisfied sufficient decrease.
    LineSearchFailed,
    /// The objective or gradient at the current point is not finite.
    NonFinite,
}

/// Inverse-Hessian state; row-major `n × n`.
#[derive(Clone, Debug)]
pub struct Bfgs {
    n: usize,
    h: Vec<f64>,
    scaled: bool,
    stalls: usize,
    /// Number of updates skipped because `sᵀy` was not positive enough.
    pub skipped_updates: usize,
    /// Objective evaluations spent in line searches.
    pub evaluations: usize,
}

/// A trial point of the line search.
struct Trial {
    t: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

impl Bfgs {
    pub fn new(n: usize) -> Self {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        Bfgs {
            n,
            h,
            scaled: false,
            stalls: 0,
            skipped_updates: 0,
            evaluations: 0,
        }
    }

    pub fn inverse_hessian(&self) -> &[f64] {
        &self.h
    }

    fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            self.h[i * self.n + i] = 1.0;
        }
        self.scaled = false;
    }

    /// One quasi-Newton iteration. `x`, `fx`, `g` hold the current point,
    /// value and gradient and are advanced on success. `f(x, g)` returns the
    /// objective and writes its gradient.
    pub fn step<F>(&mut self, x: &mut [f64], fx: &mut f64, g: &mut [f64], f: &mut F) -> BfgsStatus
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        if !fx.is_finite() || !g.iter().all(|v| v.is_finite()) {
            return BfgsStatus::NonFinite;
        }
        if g.iter().all(|&v| v == 0.0) || self.stalls >= STALL_LIMIT {
            return BfgsStatus::Converged;
        }
        let mut p = self.direction(g);
        let mut slope = dot(g, &p);
        if !(slope < 0.0) {
            self.reset();
            p = g.iter().map(|v| -v).collect();
            slope = -dot(g, g);
        }

        let Some(trial) = self.line_search(x, *fx, slope, &p, f) else {
            return BfgsStatus::LineSearchFailed;
        };

        let n = self.n;
        let s: Vec<f64> = (0..n).map(|i| trial.x[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| trial.g[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if !self.scaled {
                // initial scaling H₀ = (sᵀy / yᵀy) I
                let gamma = sy / dot(&y, &y);
                self.h.iter_mut().for_each(|v| *v *= gamma);
                self.scaled = true;
            }
            self.update(&s, &y, sy);
        } else {
            self.skipped_updates += 1;
        }
        if *fx - trial.f <= 1e-12 * fx.abs() {
            self.stalls += 1;
        } else {
            self.stalls = 0;
        }
        x.copy_from_slice(&trial.x);
        g.copy_from_slice(&trial.g);
        *fx = trial.f;
        BfgsStatus::Progress
    }

    fn evaluate<F>(&mut self, x0: &[f64], p: &[f64], t: f64, f: &mut F) -> Trial
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        self.evaluations += 1;
        let x: Vec<f64> = x0.iter().zip(p).map(|(a, b)| a + t * b).collect();
        let mut g = vec![0.0; x.len()];
        let mut fv = f(&x, &mut g);
        if !g.iter().all(|v| v.is_finite()) {
            fv = f64::INFINITY;
        }
        let slope = dot(&g, p);
        Trial { t, f: fv, slope, x, g }
    }

    /// Bracketing phase followed by zoom; falls back to the best point that
    /// satisfies sufficient decrease.
    fn line_search<F>(&mut self, x0: &[f64], f0: f64, slope0: f64, p: &[f64], f: &mut F) -> Option<Trial>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let armijo = |tr: &Trial| tr.f.is_finite() && tr.f <= f0 + C1 * tr.t * slope0;
        let mut prev = Trial {
            t: 0.0,
            f: f0,
            slope: slope0,
            x: x0.to_vec(),
            g: Vec::new(),
        };
        let mut t = 1.0;
        for i in 0..MAX_BRACKET {
            let cur = self.evaluate(x0, p, t, f);
            if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
                return self.zoom(x0, f0, slope0, p, prev, cur, f);
            }
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(x0, f0, slope0, p, cur, prev, f);
            }
            prev = cur;
            t *= 2.0;
        }
        (prev.t > 0.0).then_some(prev)
    }

    /// `lo` satisfies sufficient decrease (or is the origin); `hi` brackets
    /// a Wolfe point together with it.
    #[allow(clippy::too_many_arguments)]
    fn zoom<F>(&mut self, x0: &[f64], f0: f64, slope0: f64, p: &[f64], mut lo: Trial, mut hi: Trial, f: &mut F) -> Option<Trial>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        for _ in 0..MAX_ZOOM {
            let width = hi.t - lo.t;
            // quadratic through (lo.f, lo.slope, hi.f), safeguarded to the
            // inner 80% of the bracket
            let denom = 2.0 * (hi.f - lo.f - lo.slope * width);
            let mut t = if hi.f.is_finite() && denom != 0.0 {
                lo.t - lo.slope * width * width / denom
            } else {
                f64::NAN
            };
            let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
            let margin = 0.1 * (b - a);
            if !(t > a + margin && t < b - margin) {
                t = 0.5 * (a + b);
            }
            if (b - a) <= 1e-16 * b.abs().max(1e-300) {
                break;
            }
            let cur = self.evaluate(x0, p, t, f);
            if !(cur.f.is_finite() && cur.f <= f0 + C1 * t * slope0) || cur.f >= lo.f {
                hi = cur;
            } else {
                if cur.slope.abs() <= -C2 * slope0 {
                    return Some(cur);
                }
                if cur.slope * (hi.t - lo.t) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        (lo.t > 0.0).then_some(lo)
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| -(0..n).map(|j| self.h[i * n + j] * g[j]).sum::<f64>())
            .collect()
    }

    /// H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ
    fn update(&mut self, s: &[f64], y: &[f64], sy: f64) {
        let n = self.n;
        let rho = 1.0 / sy;
        let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.h[i * n + j] * y[j]).sum()).collect();
        let yhy = dot(y, &hy);
        let coef = (1.0 + rho * yhy) * rho;
        for i in 0..n {
            for j in 0..n {
                self.h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
            }
        }
        // keep exact symmetry against rounding drift
        for i in 0..n {
            for j in i + 1..n {
                let avg = 0.5 * (self.h[i * n + j] + self.h[j * n + i]);
                self.h[i * n + j] = avg;
                self.h[j * n + i] = avg;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
