//! Tiny expression language for inline systems and comparison functions:
//! variables `x1..xn`, `d1..dm` and (for scalar functions) `s`, the operators
//! `+ - * / ^`, parentheses and real literals. Exponents must be constant.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{msg} at column {col} in '{src}'")]
pub struct ExprError {
    pub src: String,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X(usize),
    D(usize),
    S,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::D(i) => write!(f, "d{}", i + 1),
            Var::S => f.write_str("s"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
}

/// Which variables an expression may use.
#[derive(Debug, Clone, Copy)]
pub struct Scope {
    pub nx: usize,
    pub nd: usize,
    pub scalar: bool,
}

impl Scope {
    pub fn state(nx: usize, nd: usize) -> Self {
        Self { nx, nd, scalar: false }
    }

    pub fn scalar() -> Self {
        Self {
            nx: 0,
            nd: 0,
            scalar: true,
        }
    }
}

pub fn parse(src: &str, scope: Scope) -> Result<Expr, ExprError> {
    let mut p = Parser {
        src,
        chars: src.char_indices().collect(),
        pos: 0,
        scope,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.err("unexpected input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
    scope: Scope,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError {
            src: self.src.to_owned(),
            col: self.pos + 1,
            msg: msg.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].1.is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).map(|c| c.1)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let at = self.pos;
            let exp = self.unary()?;
            if exp.has_vars() {
                self.pos = at;
                return Err(self.err("exponent must be constant"));
            }
            return Ok(Expr::Pow(Box::new(base), exp.eval(&[], &[], 0.0)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.variable(),
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of expression")),
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> String {
        let start = self.pos;
        while self.pos < self.chars.len() && f(self.chars[self.pos].1) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().map(|c| c.1).collect()
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let mut text = self.take_while(|c| c.is_ascii_digit() || c == '.');
        // exponent part, e.g. 1e-3
        if matches!(self.chars.get(self.pos), Some((_, 'e' | 'E'))) {
            let save = self.pos;
            self.pos += 1;
            let mut exp = String::from("e");
            if let Some((_, c @ ('+' | '-'))) = self.chars.get(self.pos) {
                exp.push(*c);
                self.pos += 1;
            }
            let digits = self.take_while(|c| c.is_ascii_digit());
            if digits.is_empty() {
                self.pos = save;
            } else {
                text.push_str(&exp);
                text.push_str(&digits);
            }
        }
        text.parse::<f64>().map(Expr::Num).map_err(|_| {
            self.pos = start;
            self.err("malformed number")
        })
    }

    fn variable(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let name = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
        let bad = |p: &mut Self, msg: String| {
            p.pos = start;
            Err(p.err(&msg))
        };
        if name == "s" {
            return if self.scope.scalar {
                Ok(Expr::Var(Var::S))
            } else {
                bad(self, "variable 's' is only allowed in scalar functions".into())
            };
        }
        let (kind, idx) = name.split_at(1);
        let idx: usize = match idx.parse() {
            Ok(i) if i >= 1 => i,
            _ => return bad(self, format!("unknown identifier '{name}'")),
        };
        match kind {
            "x" if idx <= self.scope.nx => Ok(Expr::Var(Var::X(idx - 1))),
            "d" if idx <= self.scope.nd => Ok(Expr::Var(Var::D(idx - 1))),
            "x" | "d" => bad(self, format!("variable '{name}' is out of range")),
            _ => bad(self, format!("unknown identifier '{name}'")),
        }
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

// Constructors folding the trivial cases so derivatives stay small.
fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), _) if *x == 0.0 => b,
        (_, Expr::Num(y)) if *y == 0.0 => a,
        (Expr::Num(x), Expr::Num(y)) => num(x + y),
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Num(y)) if *y == 0.0 => a,
        (Expr::Num(x), _) if *x == 0.0 => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), _) | (_, Expr::Num(x)) if *x == 0.0 => num(0.0),
        (Expr::Num(x), _) if *x == 1.0 => b,
        (_, Expr::Num(y)) if *y == 1.0 => a,
        (Expr::Num(x), Expr::Num(y)) => num(x * y),
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), _) if *x == 0.0 => num(0.0),
        (_, Expr::Num(y)) if *y == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => num(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

impl Expr {
    pub fn has_vars(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(_) => true,
            Expr::Neg(a) | Expr::Pow(a, _) => a.has_vars(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => a.has_vars() || b.has_vars(),
        }
    }

    pub fn eval(&self, x: &[f64], d: &[f64], s: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X(i)) => x[*i],
            Expr::Var(Var::D(i)) => d[*i],
            Expr::Var(Var::S) => s,
            Expr::Neg(a) => -a.eval(x, d, s),
            Expr::Add(a, b) => a.eval(x, d, s) + b.eval(x, d, s),
            Expr::Sub(a, b) => a.eval(x, d, s) - b.eval(x, d, s),
            Expr::Mul(a, b) => a.eval(x, d, s) * b.eval(x, d, s),
            Expr::Div(a, b) => a.eval(x, d, s) / b.eval(x, d, s),
            Expr::Pow(a, k) => {
                let base = a.eval(x, d, s);
                if k.fract() == 0.0 && k.abs() <= i32::MAX as f64 {
                    base.powi(*k as i32)
                } else {
                    base.powf(*k)
                }
            }
        }
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, v: Var) -> Expr {
        match self {
            Expr::Num(_) => num(0.0),
            Expr::Var(w) => num(if *w == v { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(v)),
            Expr::Add(a, b) => add(a.diff(v), b.diff(v)),
            Expr::Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Expr::Mul(a, b) => add(mul(a.diff(v), (**b).clone()), mul((**a).clone(), b.diff(v))),
            Expr::Div(a, b) => div(
                sub(mul(a.diff(v), (**b).clone()), mul((**a).clone(), b.diff(v))),
                Expr::Pow(b.clone(), 2.0),
            ),
            Expr::Pow(a, k) => {
                if *k == 0.0 {
                    return num(0.0);
                }
                let inner = if *k == 1.0 { num(1.0) } else { Expr::Pow(a.clone(), k - 1.0) };
                mul(mul(num(*k), inner), a.diff(v))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(src: &str) -> Expr {
        parse(src, Scope::state(2, 1)).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        let e = st("1 + 2*3^2 - 8/4/2");
        assert_eq!(e.eval(&[], &[], 0.0), 1.0 + 18.0 - 1.0);
        assert_eq!(st("-x1^2").eval(&[3.0, 0.0], &[0.0], 0.0), -9.0);
        assert_eq!(st("2^3^2").eval(&[], &[], 0.0), 512.0);
        assert_eq!(st("(x1 + d1) * x2").eval(&[1.0, 2.0], &[0.5], 0.0), 3.0);
        assert_eq!(st("1.5e-1*x1").eval(&[2.0, 0.0], &[0.0], 0.0), 0.3);
        assert_eq!(st("x1^(1/2)").eval(&[4.0, 0.0], &[0.0], 0.0), 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in ["x3", "d2", "s", "x0", "y1", "x1^x2", "(x1", "x1 +", "2 $ 3", "1..2"] {
            assert!(parse(bad, Scope::state(2, 1)).is_err(), "{bad}");
        }
        let e = parse("x1 + ", Scope::state(1, 0)).unwrap_err();
        assert!(e.to_string().contains("column"));
        assert!(parse("s^2/2", Scope::scalar()).is_ok());
        assert!(parse("x1", Scope::scalar()).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let srcs = ["x1^2 + 3*x1*x2 - x2^3/(1 + x1^2)", "-(x1 - x2)^3 + 2/x2", "x1^0.5 * x2"];
        let p = [1.3, 0.7];
        for src in srcs {
            let e = st(src);
            for (i, v) in [Var::X(0), Var::X(1)].into_iter().enumerate() {
                let g = e.diff(v).eval(&p, &[0.0], 0.0);
                let h = 1e-6;
                let (mut a, mut b) = (p, p);
                a[i] += h;
                b[i] -= h;
                let fd = (e.eval(&a, &[0.0], 0.0) - e.eval(&b, &[0.0], 0.0)) / (2.0 * h);
                assert!((g - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{src} d/d{v}: {g} vs {fd}");
            }
        }
    }
}
