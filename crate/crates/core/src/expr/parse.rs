//! Parser for the rendered expression grammar.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '·') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)?
//! atom   := number | 'x' index | func '(' expr ')' | '(' expr ')'
//! func   := 'sin' | 'cos' | 'exp'
//! ```
//!
//! Variables are 1-based (`x1 .. xd`).

use crate::error::{FexError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Formula {
    Const(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Neg(Box<Formula>),
    Add(Box<Formula>, Box<Formula>),
    Sub(Box<Formula>, Box<Formula>),
    Mul(Box<Formula>, Box<Formula>),
    Pow(Box<Formula>, u32),
    Sin(Box<Formula>),
    Cos(Box<Formula>),
    Exp(Box<Formula>),
}

impl Formula {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Formula::Const(c) => *c,
            Formula::Var(i) => x[*i],
            Formula::Neg(a) => -a.eval(x),
            Formula::Add(a, b) => a.eval(x) + b.eval(x),
            Formula::Sub(a, b) => a.eval(x) - b.eval(x),
            Formula::Mul(a, b) => a.eval(x) * b.eval(x),
            Formula::Pow(a, p) => a.eval(x).powi(*p as i32),
            Formula::Sin(a) => a.eval(x).sin(),
            Formula::Cos(a) => a.eval(x).cos(),
            Formula::Exp(a) => a.eval(x).exp(),
        }
    }

    /// Largest variable index referenced plus one (0 for constants).
    pub fn min_dim(&self) -> usize {
        match self {
            Formula::Const(_) => 0,
            Formula::Var(i) => i + 1,
            Formula::Neg(a) | Formula::Pow(a, _) | Formula::Sin(a) | Formula::Cos(a) | Formula::Exp(a) => {
                a.min_dim()
            }
            Formula::Add(a, b) | Formula::Sub(a, b) | Formula::Mul(a, b) => a.min_dim().max(b.min_dim()),
        }
    }
}

pub fn parse_formula(text: &str) -> Result<Formula> {
    let mut p = Parser { src: text, pos: 0 };
    let f = p.expr()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(f)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: &str) -> FexError {
        FexError::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Formula> {
        let mut lhs = self.term()?;
        loop {
            if self.eat("+") {
                lhs = Formula::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat("-") {
                lhs = Formula::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Formula> {
        let mut lhs = self.unary()?;
        while self.eat("*") || self.eat("·") {
            lhs = Formula::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula> {
        if self.eat("-") {
            return Ok(Formula::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Formula> {
        let base = self.atom()?;
        if self.eat("^") {
            self.skip_ws();
            let digits: String = self.rest().chars().take_while(|c| c.is_ascii_digit()).collect();
            if digits.is_empty() {
                return Err(self.error("expected integer exponent"));
            }
            self.pos += digits.len();
            let p = digits.parse::<u32>().map_err(|_| self.error("exponent too large"))?;
            return Ok(Formula::Pow(Box::new(base), p));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Formula> {
        self.skip_ws();
        for (name, ctor) in [
            ("sin", Formula::Sin as fn(Box<Formula>) -> Formula),
            ("cos", Formula::Cos),
            ("exp", Formula::Exp),
        ] {
            if self.rest().starts_with(name) {
                self.pos += name.len();
                if !self.eat("(") {
                    return Err(self.error("expected `(` after function name"));
                }
                let inner = self.expr()?;
                if !self.eat(")") {
                    return Err(self.error("expected `)`"));
                }
                return Ok(ctor(Box::new(inner)));
            }
        }
        if self.eat("(") {
            let inner = self.expr()?;
            if !self.eat(")") {
                return Err(self.error("expected `)`"));
            }
            return Ok(inner);
        }
        if self.rest().starts_with('x') {
            self.pos += 1;
            let digits: String = self.rest().chars().take_while(|c| c.is_ascii_digit()).collect();
            let idx: usize = digits.parse().map_err(|_| self.error("expected variable index"))?;
            if idx == 0 {
                return Err(self.error("variables are numbered from x1"));
            }
            self.pos += digits.len();
            return Ok(Formula::Var(idx - 1));
        }
        self.number()
    }

    fn number(&mut self) -> Result<Formula> {
        let rest = self.rest();
        let bytes = rest.as_bytes();
        let mut end = 0;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end == 0 {
            return Err(self.error("expected number, variable, function or `(`"));
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            let start = k;
            while k < bytes.len() && bytes[k].is_ascii_digit() {
                k += 1;
            }
            if k > start {
                end = k;
            }
        }
        let v: f64 = rest[..end].parse().map_err(|_| self.error("malformed number"))?;
        self.pos += end;
        Ok(Formula::Const(v))
    }
}
