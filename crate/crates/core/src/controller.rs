//! The operator-sequence policy: independent per-slot softmax distributions
//! trained by a risk-seeking quantile policy gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::expr::{Expression, OperatorLibrary, OperatorSequence, TreeShape};
use crate::problems::{PdeProblem, PreparedBatch};
use crate::tuner::{coarse_tune, Schedule, TuneFlags};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Probability of drawing a slot uniformly instead of from its PMF.
    pub epsilon: f64,
    /// Risk level; the update keeps sequences above the (1 − ν) quantile.
    pub nu: f64,
    pub learning_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            epsilon: 0.1,
            nu: 0.25,
            learning_rate: 0.05,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.epsilon)
            && self.nu > 0.0
            && self.nu <= 1.0
            && self.learning_rate.is_finite()
            && self.learning_rate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FexError::Config(format!(
                "controller needs epsilon in [0,1], nu in (0,1], learning_rate >= 0; got {self:?}"
            )))
        }
    }
}

/// Trainable logits, one row per tree slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    logits: Vec<Vec<f64>>,
    config: PolicyConfig,
}

/// Outcome of one policy update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UpdateReport {
    /// The empirical (1 − ν) quantile of the batch scores.
    pub quantile: f64,
    /// Sequences with score ≥ quantile (ties included); the gradient is
    /// averaged over these.
    pub retained: usize,
    /// Retained sequences with a strictly positive advantage.
    pub contributing: usize,
    /// Every score was zero, so the logits were left alone.
    pub noop: bool,
}

impl Policy {
    /// Uniform policy (all logits zero) aligned with `shape`'s slots.
    pub fn uniform(shape: &TreeShape, library: &OperatorLibrary, config: PolicyConfig) -> Self {
        let logits = shape
            .slots()
            .iter()
            .map(|s| vec![0.0; library.len_for(s.kind())])
            .collect();
        Policy { logits, config }
    }

    pub fn from_logits(logits: Vec<Vec<f64>>, config: PolicyConfig) -> Result<Self> {
        if logits.iter().any(|row| row.is_empty() || row.iter().any(|v| !v.is_finite())) {
            return Err(FexError::Config("policy logits must be finite and non-empty".into()));
        }
        Ok(Policy { logits, config })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn num_slots(&self) -> usize {
        self.logits.len()
    }

    /// Softmax of slot `slot`'s logits.
    pub fn pmf(&self, slot: usize) -> Vec<f64> {
        softmax(&self.logits[slot])
    }

    pub fn pmfs(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    /// Per slot: uniform with probability ε, else from the slot's PMF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OperatorSequence {
        let choices = self
            .logits
            .iter()
            .map(|row| {
                if rng.random::<f64>() < self.config.epsilon {
                    rng.random_range(0..row.len())
                } else {
                    draw(&softmax(row), rng)
                }
            })
            .collect();
        OperatorSequence::new(choices)
    }

    /// log p_Φ(e) under the softmax policy (exploration excluded).
    pub fn log_prob(&self, ops: &OperatorSequence) -> f64 {
        self.logits
            .iter()
            .zip(ops.choices())
            .map(|(row, &c)| row[c] - log_sum_exp(row))
            .sum()
    }

    /// ∇_Φ log p_Φ(e): per slot, `onehot(e_i) − p_i`.
    pub fn grad_log_prob(&self, ops: &OperatorSequence) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .zip(ops.choices())
            .map(|(row, &c)| {
                let mut g = softmax(row);
                for v in &mut g {
                    *v = -*v;
                }
                g[c] += 1.0;
                g
            })
            .collect()
    }

    /// Risk-seeking gradient estimate against a fixed threshold:
    /// `Σ_{S_i ≥ s} (S_i − s) ∇ log p(e_i)` divided by the number of
    /// retained sequences.
    pub fn quantile_gradient(&self, batch: &[(OperatorSequence, f64)], threshold: f64) -> (Vec<Vec<f64>>, usize, usize) {
        let mut grad: Vec<Vec<f64>> = self.logits.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut retained = 0;
        let mut contributing = 0;
        for (ops, s) in batch {
            if *s < threshold {
                continue;
            }
            retained += 1;
            let adv = s - threshold;
            if adv <= 0.0 {
                continue;
            }
            contributing += 1;
            for (slot, (row, &c)) in grad.iter_mut().zip(ops.choices()).enumerate() {
                let p = softmax(&self.logits[slot]);
                for (g, pk) in row.iter_mut().zip(&p) {
                    *g -= adv * pk;
                }
                row[c] += adv;
            }
        }
        if retained > 0 {
            let n = retained as f64;
            grad.iter_mut().flatten().for_each(|g| *g /= n);
        }
        (grad, retained, contributing)
    }

    /// One gradient-ascent step on the quantile objective.
    pub fn update(&mut self, batch: &[(OperatorSequence, f64)]) -> Result<UpdateReport> {
        if batch.len() < 2 {
            return Err(FexError::Config(format!("policy update needs at least 2 scored sequences, got {}", batch.len())));
        }
        let scores: Vec<f64> = batch.iter().map(|(_, s)| *s).collect();
        let q = quantile(&scores, 1.0 - self.config.nu);
        if scores.iter().all(|&s| s == 0.0) {
            return Ok(UpdateReport {
                quantile: q,
                retained: 0,
                contributing: 0,
                noop: true,
            });
        }
        let (grad, retained, contributing) = self.quantile_gradient(batch, q);
        let lr = self.config.learning_rate;
        for (row, g) in self.logits.iter_mut().zip(&grad) {
            for (l, gk) in row.iter_mut().zip(g) {
                *l += lr * gk;
            }
        }
        Ok(UpdateReport {
            quantile: q,
            retained,
            contributing,
            noop: false,
        })
    }

    /// Text rows `slot <i> <logit>...`; floats use round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.logits.iter().enumerate() {
            out.push_str(&format!("slot {i}"));
            for v in row {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses rows written by [`Policy::to_text`]; lines not starting with
    /// `slot` are ignored.
    pub fn from_text(text: &str, config: PolicyConfig) -> Result<Self> {
        let mut logits = Vec::new();
        for line in text.lines().filter(|l| l.starts_with("slot ")) {
            let mut it = line.split_whitespace().skip(1);
            let idx: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| FexError::Checkpoint(format!("bad policy row `{line}`")))?;
            if idx != logits.len() {
                return Err(FexError::Checkpoint(format!("policy rows out of order at slot {idx}")));
            }
            let row = it
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| FexError::Checkpoint(format!("policy slot {idx}: {e}")))?;
            logits.push(row);
        }
        if logits.is_empty() {
            return Err(FexError::Checkpoint("no policy rows".into()));
        }
        Policy::from_logits(logits, config).map_err(|e| FexError::Checkpoint(e.to_string()))
    }
}

/// `1 / (1 + L)`; poisoned (non-finite) losses score 0.
pub fn score_from_loss(loss: f64) -> f64 {
    if loss.is_finite() && loss >= 0.0 {
        1.0 / (1.0 + loss)
    } else {
        0.0
    }
}

/// Empirical `q`-quantile with linear interpolation between order
/// statistics. `values` must be non-empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// A coarse-tuned candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub ops: OperatorSequence,
    pub loss: f64,
    pub score: f64,
    /// The expression at its tuned parameters.
    pub expr: Expression,
    pub flags: TuneFlags,
}

impl ScoredSequence {
    pub fn new(expr: Expression, loss: f64, flags: TuneFlags) -> Self {
        ScoredSequence {
            ops: expr.ops().clone(),
            loss,
            score: score_from_loss(loss),
            expr,
            flags,
        }
    }
}

/// Builds the expression for `ops` (weights and biases from `rng`),
/// coarse-tunes it on `batch` and scores the result.
#[allow(clippy::too_many_arguments)]
pub fn score<R: Rng + ?Sized>(
    ops: &OperatorSequence,
    shape: &TreeShape,
    library: &OperatorLibrary,
    problem: &PdeProblem,
    batch: &PreparedBatch,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<ScoredSequence> {
    let mut expr = Expression::build(*shape, ops.clone(), library, problem.dim, rng)?;
    let out = coarse_tune(&mut expr, problem, batch, schedule);
    Ok(ScoredSequence::new(expr, out.loss, out.flags))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn draw<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;

    fn policy(epsilon: f64) -> Policy {
        Policy::uniform(
            &TreeShape::default(),
            &OperatorLibrary::default(),
            PolicyConfig {
                epsilon,
                ..PolicyConfig::default()
            },
        )
    }

    fn chi_square_p(counts: &[usize], expected: &[f64]) -> f64 {
        let stat: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&c, &e)| (c as f64 - e).powi(2) / e)
            .sum();
        let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
        1.0 - dist.cdf(stat)
    }

    fn slot_counts(p: &Policy, draws: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts: Vec<Vec<usize>> = p.logits().iter().map(|r| vec![0; r.len()]).collect();
        for _ in 0..draws {
            for (slot, &c) in p.sample(&mut rng).choices().iter().enumerate() {
                counts[slot][c] += 1;
            }
        }
        counts
    }

    #[test]
    fn scores() {
        assert_eq!(score_from_loss(0.0), 1.0);
        assert_eq!(score_from_loss(1.0), 0.5);
        assert_eq!(score_from_loss(f64::INFINITY), 0.0);
        assert_eq!(score_from_loss(f64::NAN), 0.0);
    }

    #[test]
    fn pmfs_are_distributions() {
        let mut p = policy(0.1);
        p.logits[1][3] = 40.0;
        p.logits[4][0] = -700.0;
        for row in p.pmfs() {
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_exploration_is_uniform() {
        let mut p = policy(1.0);
        p.logits[1][5] = 10.0;
        let n = 100_000;
        for row in slot_counts(&p, n, 1) {
            let e = vec![n as f64 / row.len() as f64; row.len()];
            assert!(chi_square_p(&row, &e) > 1e-3);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        let mut p = policy(0.0);
        for row in &mut p.logits {
            row[1] = 20.0;
        }
        let n = 20_000;
        for row in slot_counts(&p, n, 2) {
            assert!(row[1] as f64 >= 0.999 * n as f64);
        }
    }

    #[test]
    fn sampling_follows_mixture_law() {
        let mut p = policy(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for row in &mut p.logits {
            for v in row.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let n = 100_000;
        for (slot, row) in slot_counts(&p, n, 4).iter().enumerate() {
            let k = row.len() as f64;
            let expected: Vec<f64> = p.pmf(slot).iter().map(|q| n as f64 * (0.1 / k + 0.9 * q)).collect();
            assert!(chi_square_p(row, &expected) > 1e-3, "slot {slot}");
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = Policy::from_logits(vec![vec![0.3, -1.2, 0.8]], PolicyConfig::default()).unwrap();
        let ops = OperatorSequence::new(vec![2]);
        let g = p.grad_log_prob(&ops);
        let h = 1e-6;
        for k in 0..3 {
            let mut up = p.clone();
            up.logits[0][k] += h;
            let mut dn = p.clone();
            dn.logits[0][k] -= h;
            let fd = (up.log_prob(&ops) - dn.log_prob(&ops)) / (2.0 * h);
            assert!((fd - g[0][k]).abs() < 1e-6, "k={k}: {fd} vs {}", g[0][k]);
        }
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.0), 1.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 1.0), 4.0);
        assert!((quantile(&[3.0, 1.0, 2.0, 4.0], 0.75) - 3.25).abs() < 1e-15);
        assert_eq!(quantile(&[0.5, 0.5, 0.5], 0.75), 0.5);
    }

    #[test]
    fn single_winner_gains_probability() {
        let mut p = policy(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let winner = p.sample(&mut rng);
        let mut batch = vec![(winner.clone(), 1.0)];
        for _ in 0..7 {
            batch.push((p.sample(&mut rng), 0.0));
        }
        let before = p.pmfs();
        let config = PolicyConfig {
            nu: 0.5,
            ..*p.config()
        };
        p.config = config;
        let report = p.update(&batch).unwrap();
        assert_eq!(report.contributing, 1);
        assert!(!report.noop);
        for (slot, &c) in winner.choices().iter().enumerate() {
            assert!(p.pmf(slot)[c] > before[slot][c]);
        }
    }

    #[test]
    fn identical_scores_give_zero_gradient() {
        let mut p = policy(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<_> = (0..6).map(|_| (p.sample(&mut rng), 0.3)).collect();
        let before = p.clone();
        let report = p.update(&batch).unwrap();
        assert_eq!(report.contributing, 0);
        assert_eq!(p.logits, before.logits);
    }

    #[test]
    fn all_zero_scores_are_a_flagged_noop() {
        let mut p = policy(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch: Vec<_> = (0..4).map(|_| (p.sample(&mut rng), 0.0)).collect();
        let before = p.clone();
        assert!(p.update(&batch).unwrap().noop);
        assert_eq!(p, before);
        assert!(p.update(&batch[..1]).is_err());
    }

    #[test]
    fn winner_probability_rises_monotonically() {
        let mut p = policy(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let winner = p.sample(&mut rng);
        let mut prev: Vec<f64> = winner.choices().iter().enumerate().map(|(s, &c)| p.pmf(s)[c]).collect();
        let start = prev.clone();
        for _ in 0..200 {
            let mut batch: Vec<_> = (0..15)
                .map(|_| {
                    let e = p.sample(&mut rng);
                    let s = if e == winner { 1.0 } else { 0.0 };
                    (e, s)
                })
                .collect();
            batch.push((winner.clone(), 1.0));
            p.update(&batch).unwrap();
            let now: Vec<f64> = winner.choices().iter().enumerate().map(|(s, &c)| p.pmf(s)[c]).collect();
            for (a, b) in now.iter().zip(&prev) {
                assert!(a >= b);
            }
            prev = now;
        }
        assert!(prev.iter().zip(&start).all(|(a, b)| a > b), "{prev:?}");
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut p = policy(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for row in &mut p.logits {
            for v in row.iter_mut() {
                *v = rng.random_range(-3.0..3.0) / 7.0;
            }
        }
        let back = Policy::from_text(&p.to_text(), *p.config()).unwrap();
        assert_eq!(back, p);
        assert!(Policy::from_text("slot 1 0.0\n", *p.config()).is_err());
        assert!(Policy::from_text("slot 0 x\n", *p.config()).is_err());
    }
}
