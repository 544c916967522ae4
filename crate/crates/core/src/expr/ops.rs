//! Operator sets for the expression tree.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Elementary unary functions available at tree leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryKind {
    Zero,
    One,
    Identity,
    Square,
    Cube,
    Quartic,
    Exp,
    Sin,
    Cos,
}

impl UnaryKind {
    pub fn is_periodic(self) -> bool {
        matches!(self, UnaryKind::Sin | UnaryKind::Cos)
    }
}

/// A unary operator `u(k t)` where `k` is an integer base frequency.
///
/// The base frequency only exists for `sin` and `cos`; every other kind has
/// `base_freq == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UnaryOp {
    kind: UnaryKind,
    base_freq: u32,
}

impl UnaryOp {
    pub const fn plain(kind: UnaryKind) -> Self {
        UnaryOp { kind, base_freq: 1 }
    }

    /// Returns `None` for a zero frequency or for a scaled non-periodic kind.
    pub fn scaled(kind: UnaryKind, base_freq: u32) -> Option<Self> {
        if base_freq == 0 || (base_freq > 1 && !kind.is_periodic()) {
            return None;
        }
        Some(UnaryOp { kind, base_freq })
    }

    pub fn kind(&self) -> UnaryKind {
        self.kind
    }

    pub fn base_freq(&self) -> u32 {
        self.base_freq
    }

    /// Value and first three derivatives of the unscaled function at `z`.
    ///
    /// The base frequency is applied by the caller as part of the argument
    /// scale, so `sin·k` evaluated at `α x` is `sin((k α) x)`.
    #[inline]
    pub fn derivatives(&self, z: f64) -> [f64; 4] {
        match self.kind {
            UnaryKind::Zero => [0.0; 4],
            UnaryKind::One => [1.0, 0.0, 0.0, 0.0],
            UnaryKind::Identity => [z, 1.0, 0.0, 0.0],
            UnaryKind::Square => [z * z, 2.0 * z, 2.0, 0.0],
            UnaryKind::Cube => [z * z * z, 3.0 * z * z, 6.0 * z, 6.0],
            UnaryKind::Quartic => {
                let z2 = z * z;
                [z2 * z2, 4.0 * z2 * z, 12.0 * z2, 24.0 * z]
            }
            UnaryKind::Exp => {
                let e = z.exp();
                [e; 4]
            }
            UnaryKind::Sin => {
                let (s, c) = z.sin_cos();
                [s, c, -s, -c]
            }
            UnaryKind::Cos => {
                let (s, c) = z.sin_cos();
                [c, -s, -c, s]
            }
        }
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match self.kind {
            UnaryKind::Zero => 0.0,
            UnaryKind::One => 1.0,
            UnaryKind::Identity => z,
            UnaryKind::Square => z * z,
            UnaryKind::Cube => z * z * z,
            UnaryKind::Quartic => {
                let z2 = z * z;
                z2 * z2
            }
            UnaryKind::Exp => z.exp(),
            UnaryKind::Sin => z.sin(),
            UnaryKind::Cos => z.cos(),
        }
    }

    /// Short name used in configs and telemetry, e.g. `sin*21`.
    pub fn name(&self) -> String {
        let base = match self.kind {
            UnaryKind::Zero => "0",
            UnaryKind::One => "1",
            UnaryKind::Identity => "x",
            UnaryKind::Square => "x^2",
            UnaryKind::Cube => "x^3",
            UnaryKind::Quartic => "x^4",
            UnaryKind::Exp => "exp",
            UnaryKind::Sin => "sin",
            UnaryKind::Cos => "cos",
        };
        if self.base_freq == 1 {
            base.to_string()
        } else {
            format!("{base}*{}", self.base_freq)
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let (head, freq) = match name.split_once('*') {
            Some((h, f)) => (h.trim(), f.trim().parse::<u32>().ok()?),
            None => (name.trim(), 1),
        };
        let kind = match head {
            "0" => UnaryKind::Zero,
            "1" => UnaryKind::One,
            "x" | "id" => UnaryKind::Identity,
            "x^2" => UnaryKind::Square,
            "x^3" => UnaryKind::Cube,
            "x^4" => UnaryKind::Quartic,
            "exp" => UnaryKind::Exp,
            "sin" => UnaryKind::Sin,
            "cos" => UnaryKind::Cos,
            _ => return None,
        };
        UnaryOp::scaled(kind, freq)
    }
}

impl fmt::Display for UnaryOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Binary operator at internal tree nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
        }
    }
}

/// How a leaf's per-dimension terms are joined into the leaf output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerOp {
    Sum,
    Product,
}

impl CombinerOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CombinerOp::Sum => "sum",
            CombinerOp::Product => "prod",
        }
    }
}

/// The operator sets sampled by the controller, one per slot kind.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorLibrary {
    pub combiners: Vec<CombinerOp>,
    pub unaries: Vec<UnaryOp>,
    pub binaries: Vec<BinaryOp>,
}

/// Base frequencies `3, 6, ..., 24` of the multiscale sin/cos variants.
pub const DEFAULT_BASE_FREQUENCIES: [u32; 8] = [3, 6, 9, 12, 15, 18, 21, 24];

impl OperatorLibrary {
    /// Plain operators plus `sin·k` and `cos·k` for every `k` in `base_freqs`.
    pub fn multiscale(base_freqs: &[u32]) -> Self {
        use UnaryKind::*;
        let mut unaries: Vec<UnaryOp> = [Zero, One, Identity, Square, Cube, Quartic, Exp, Sin, Cos]
            .into_iter()
            .map(UnaryOp::plain)
            .collect();
        for kind in [Sin, Cos] {
            for &k in base_freqs {
                if k > 1 {
                    unaries.push(UnaryOp::scaled(kind, k).expect("periodic kind"));
                }
            }
        }
        OperatorLibrary {
            combiners: vec![CombinerOp::Sum, CombinerOp::Product],
            unaries,
            binaries: vec![BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul],
        }
    }

    pub fn len_for(&self, slot: super::SlotKind) -> usize {
        match slot {
            super::SlotKind::Combiner => self.combiners.len(),
            super::SlotKind::Unary => self.unaries.len(),
            super::SlotKind::Binary => self.binaries.len(),
        }
    }

    pub fn unary_index(&self, op: UnaryOp) -> Option<usize> {
        self.unaries.iter().position(|u| *u == op)
    }
}

impl Default for OperatorLibrary {
    fn default() -> Self {
        OperatorLibrary::multiscale(&DEFAULT_BASE_FREQUENCIES)
    }
}
