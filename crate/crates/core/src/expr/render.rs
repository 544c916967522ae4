//! Text rendering of expressions.
//!
//! Simplifications applied, and no others: terms whose coefficient is below
//! [`PRINT_THRESHOLD`] are dropped (for `sin` the frequency counts towards
//! the coefficient, since `|sin(a·x)| ≤ |a|` on the unit box), `k·α` is printed as a single frequency,
//! `(α·x)^p` is printed as `α^p` folded into the coefficient of `x^p`, zero
//! biases are omitted, and the scalar coefficients of multiplied monomials
//! are folded into one leading coefficient.

use super::{BinaryOp, CombinerOp, Expression, Leaf, UnaryKind};

pub const PRINT_THRESHOLD: f64 = 5e-5;

#[derive(Clone, Debug)]
enum Piece {
    Zero,
    Const(f64),
    /// `coefficient * body`, where body is a product of factors.
    Mono(f64, String),
    /// A sum: its non-constant part as text, plus a separate constant so
    /// constants from different subtrees can be merged.
    Poly(String, f64),
}

struct Fmt {
    precision: usize,
}

impl Fmt {
    fn num(&self, v: f64) -> String {
        let s = format!("{:.*}", self.precision, v);
        // never print "-0.000"
        if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
            s[1..].to_string()
        } else {
            s
        }
    }

    fn arg(&self, freq: f64, var: usize) -> String {
        if self.num(freq) == self.num(1.0) {
            format!("x{var}")
        } else {
            format!("{}*x{var}", self.num(freq))
        }
    }

    /// `u(freq·x_var)` as `(scale, body)` with `u(freq·x) = scale·body`;
    /// powers pull `freq^p` into the scale. `None` for the constant kinds.
    fn body(&self, kind: UnaryKind, freq: f64, var: usize) -> Option<(f64, String)> {
        let x = format!("x{var}");
        Some(match kind {
            UnaryKind::Zero | UnaryKind::One => return None,
            UnaryKind::Identity => (freq, x),
            UnaryKind::Square => (freq.powi(2), format!("{x}^2")),
            UnaryKind::Cube => (freq.powi(3), format!("{x}^3")),
            UnaryKind::Quartic => (freq.powi(4), format!("{x}^4")),
            UnaryKind::Exp => (1.0, format!("exp({})", self.arg(freq, var))),
            UnaryKind::Sin => (1.0, format!("sin({})", self.arg(freq, var))),
            UnaryKind::Cos => (1.0, format!("cos({})", self.arg(freq, var))),
        })
    }

    fn text(&self, piece: &Piece) -> String {
        match piece {
            Piece::Zero => "0".to_string(),
            Piece::Const(c) => self.num(*c),
            Piece::Mono(c, body) => format!("{}*{body}", self.num(*c)),
            Piece::Poly(p, c) if small(*c) => p.clone(),
            Piece::Poly(p, c) => join_sum(&[p.clone(), self.num(*c)]),
        }
    }
}

/// Bound on `|u(freq·x)|` relative to its printed scale, for |x| ≤ 1.
fn damping(kind: UnaryKind, freq: f64) -> f64 {
    match kind {
        UnaryKind::Sin => freq.abs().min(1.0),
        _ => 1.0,
    }
}

fn small(v: f64) -> bool {
    v.abs() < PRINT_THRESHOLD
}

fn join_sum(parts: &[String]) -> String {
    let mut out = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i == 0 {
            out.push_str(p);
        } else if let Some(rest) = p.strip_prefix('-') {
            out.push_str(" - ");
            out.push_str(rest);
        } else {
            out.push_str(" + ");
            out.push_str(p);
        }
    }
    out
}

fn leaf_piece(expr: &Expression, leaf: &Leaf, f: &Fmt) -> Piece {
    let k = f64::from(leaf.unary.base_freq());
    let kind = leaf.unary.kind();
    let p = expr.params();
    let bias = p[leaf.bias];
    match leaf.combiner {
        CombinerOp::Sum => {
            let mut constant = 0.0;
            let mut terms: Vec<(f64, String)> = Vec::new();
            if !small(bias) {
                constant += bias;
            }
            for i in 0..expr.dim() {
                let w = p[leaf.weight[i]];
                if small(w) {
                    continue;
                }
                match kind {
                    UnaryKind::Zero => {}
                    UnaryKind::One => constant += w,
                    _ => {
                        let freq = k * p[leaf.alpha[i]];
                        let (scale, body) = f.body(kind, freq, i + 1).expect("non-constant");
                        if !small(w * scale * damping(kind, freq)) {
                            terms.push((w * scale, body));
                        }
                    }
                }
            }
            let has_const = !small(constant);
            match (terms.len(), has_const) {
                (0, false) => Piece::Zero,
                (0, true) => Piece::Const(constant),
                (1, false) => {
                    let (w, body) = terms.pop().expect("one term");
                    Piece::Mono(w, body)
                }
                _ => {
                    let parts: Vec<String> = terms.iter().map(|(w, b)| format!("{}*{b}", f.num(*w))).collect();
                    Piece::Poly(join_sum(&parts), if has_const { constant } else { 0.0 })
                }
            }
        }
        CombinerOp::Product => {
            let w = p[leaf.weight[0]];
            let bias_piece = if small(bias) { Piece::Zero } else { Piece::Const(bias) };
            if small(w) || kind == UnaryKind::Zero {
                return bias_piece;
            }
            let (mut scale, mut damp) = (1.0, 1.0);
            let factors: Vec<String> = (0..expr.dim())
                .filter_map(|i| {
                    let freq = k * p[leaf.alpha[i]];
                    damp *= damping(kind, freq);
                    f.body(kind, freq, i + 1)
                })
                .map(|(c, body)| {
                    scale *= c;
                    body
                })
                .collect();
            if factors.is_empty() {
                let c = w + bias;
                return if small(c) { Piece::Zero } else { Piece::Const(c) };
            }
            if small(w * scale * damp) {
                return bias_piece;
            }
            let mono = Piece::Mono(w * scale, factors.join("*"));
            match bias_piece {
                Piece::Zero => mono,
                _ => Piece::Poly(f.text(&mono), bias),
            }
        }
    }
}

fn negate(piece: Piece) -> Piece {
    match piece {
        Piece::Zero => Piece::Zero,
        Piece::Const(c) => Piece::Const(-c),
        Piece::Mono(c, b) => Piece::Mono(-c, b),
        Piece::Poly(p, c) if single_term(&p) => match p.strip_prefix('-') {
            Some(rest) => Piece::Poly(rest.to_string(), -c),
            None => Piece::Poly(format!("-{p}"), -c),
        },
        Piece::Poly(p, c) => Piece::Poly(format!("-({p})"), -c),
    }
}

/// No `+`/`-` outside parentheses, apart from a leading sign or an exponent.
fn single_term(text: &str) -> bool {
    let mut depth = 0i32;
    let mut prev = ' ';
    for (i, ch) in text.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            '+' | '-' if depth == 0 && i > 0 && prev != 'e' => return false,
            _ => {}
        }
        prev = ch;
    }
    true
}

fn combine(f: &Fmt, op: BinaryOp, a: Piece, b: Piece) -> Piece {
    use Piece::*;
    match op {
        BinaryOp::Mul => {
            let folded = match (a, b) {
                (Zero, _) | (_, Zero) => Zero,
                (Const(x), Const(y)) => Const(x * y),
                (Const(c), Mono(e, body)) | (Mono(e, body), Const(c)) => Mono(c * e, body),
                (Mono(c, b1), Mono(e, b2)) => Mono(c * e, format!("{b1}*{b2}")),
                (Const(c), p @ Poly(..)) | (p @ Poly(..), Const(c)) => Poly(format!("{}*({})", f.num(c), f.text(&p)), 0.0),
                (Mono(c, body), p @ Poly(..)) | (p @ Poly(..), Mono(c, body)) => {
                    Poly(format!("{}*{body}*({})", f.num(c), f.text(&p)), 0.0)
                }
                (p @ Poly(..), q @ Poly(..)) => Poly(format!("({})*({})", f.text(&p), f.text(&q)), 0.0),
            };
            match folded {
                Const(c) | Mono(c, _) if small(c) => Zero,
                other => other,
            }
        }
        BinaryOp::Add | BinaryOp::Sub => {
            let b = if op == BinaryOp::Sub { negate(b) } else { b };
            match (a, b) {
                (Zero, x) | (x, Zero) => x,
                (Const(x), Const(y)) => {
                    if small(x + y) {
                        Zero
                    } else {
                        Const(x + y)
                    }
                }
                (x, y) => {
                    let split = |p: Piece| match p {
                        Zero => (None, 0.0),
                        Const(c) => (None, c),
                        Poly(t, c) => (Some(t), c),
                        mono => (Some(f.text(&mono)), 0.0),
                    };
                    let (tx, cx) = split(x);
                    let (ty, cy) = split(y);
                    let c = cx + cy;
                    let c = if small(c) { 0.0 } else { c };
                    match (tx, ty) {
                        (Some(p), Some(q)) => Poly(join_sum(&[p, q]), c),
                        (Some(p), None) | (None, Some(p)) => Poly(p, c),
                        (None, None) if c == 0.0 => Zero,
                        (None, None) => Const(c),
                    }
                }
            }
        }
    }
}

fn node_piece(expr: &Expression, node: usize, f: &Fmt) -> Piece {
    let internal = expr.nodes().len();
    if node >= internal {
        leaf_piece(expr, &expr.leaves()[node - internal], f)
    } else {
        let a = node_piece(expr, 2 * node + 1, f);
        let b = node_piece(expr, 2 * node + 2, f);
        combine(f, expr.nodes()[node], a, b)
    }
}

pub(super) fn render(expr: &Expression, precision: usize) -> String {
    let f = Fmt { precision };
    let piece = node_piece(expr, 0, &f);
    f.text(&piece)
}
