//! Tiny expression language for time- and state-dependent coefficients.
//!
//! Grammar: numeric literals, the variables `t` (time) and `w` (Brownian
//! state), `+ - * /`, unary minus, parentheses, and the functions `exp`,
//! `tanh`, `sin`, `min`, `max`, `clamp`.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub enum Expr<R> {
    Const(R),
    T,
    W,
    Neg(Box<Expr<R>>),
    Add(Box<Expr<R>>, Box<Expr<R>>),
    Sub(Box<Expr<R>>, Box<Expr<R>>),
    Mul(Box<Expr<R>>, Box<Expr<R>>),
    Div(Box<Expr<R>>, Box<Expr<R>>),
    Exp(Box<Expr<R>>),
    Tanh(Box<Expr<R>>),
    Sin(Box<Expr<R>>),
    Min(Box<Expr<R>>, Box<Expr<R>>),
    Max(Box<Expr<R>>, Box<Expr<R>>),
    Clamp(Box<Expr<R>>, Box<Expr<R>>, Box<Expr<R>>),
}

impl<R: Real> Expr<R> {
    pub fn parse(src: &str) -> Result<Self> {
        let mut p = Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        };
        p.skip_ws();
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(Error::parse(p.pos, "trailing input"));
        }
        Ok(e)
    }

    #[inline]
    pub fn eval(&self, t: R, w: R) -> R {
        match self {
            Expr::Const(c) => *c,
            Expr::T => t,
            Expr::W => w,
            Expr::Neg(a) => -a.eval(t, w),
            Expr::Add(a, b) => a.eval(t, w) + b.eval(t, w),
            Expr::Sub(a, b) => a.eval(t, w) - b.eval(t, w),
            Expr::Mul(a, b) => a.eval(t, w) * b.eval(t, w),
            Expr::Div(a, b) => a.eval(t, w) / b.eval(t, w),
            Expr::Exp(a) => a.eval(t, w).exp(),
            Expr::Tanh(a) => a.eval(t, w).tanh(),
            Expr::Sin(a) => a.eval(t, w).sin(),
            Expr::Min(a, b) => a.eval(t, w).min(b.eval(t, w)),
            Expr::Max(a, b) => a.eval(t, w).max(b.eval(t, w)),
            Expr::Clamp(x, lo, hi) => x.eval(t, w).max(lo.eval(t, w)).min(hi.eval(t, w)),
        }
    }

    pub fn uses_w(&self) -> bool {
        self.any(&|e| matches!(e, Expr::W))
    }

    pub fn uses_t(&self) -> bool {
        self.any(&|e| matches!(e, Expr::T))
    }

    fn any(&self, pred: &dyn Fn(&Self) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        match self {
            Expr::Const(_) | Expr::T | Expr::W => false,
            Expr::Neg(a) | Expr::Exp(a) | Expr::Tanh(a) | Expr::Sin(a) => a.any(pred),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.any(pred) || b.any(pred),
            Expr::Clamp(a, b, c) => a.any(pred) || b.any(pred) || c.any(pred),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::parse(self.pos, format!("expected '{}'", c as char)))
        }
    }

    fn expr<R: Real>(&mut self) -> Result<Expr<R>> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term<R: Real>(&mut self) -> Result<Expr<R>> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor<R: Real>(&mut self) -> Result<Expr<R>> {
        if self.eat(b'-') {
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.primary()
    }

    fn primary<R: Real>(&mut self) -> Result<Expr<R>> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(Error::parse(self.pos, "expected expression")),
        }
    }

    fn number<R: Real>(&mut self) -> Result<Expr<R>> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || c == b'.')
        {
            self.pos += 1;
        }
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        let text = &self.src[start..self.pos];
        let value: f64 = text
            .parse()
            .map_err(|_| Error::parse(start, format!("bad numeric literal '{text}'")))?;
        self.skip_ws();
        Ok(Expr::Const(R::of(value)))
    }

    fn ident<R: Real>(&mut self) -> Result<Expr<R>> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric()) {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        self.skip_ws();
        match name {
            "t" => Ok(Expr::T),
            "w" => Ok(Expr::W),
            "exp" | "tanh" | "sin" => {
                let args = self.args(name, start, 1)?;
                let a = Box::new(args.into_iter().next().unwrap());
                Ok(match name {
                    "exp" => Expr::Exp(a),
                    "tanh" => Expr::Tanh(a),
                    _ => Expr::Sin(a),
                })
            }
            "min" | "max" => {
                let mut args = self.args(name, start, 2)?.into_iter();
                let a = Box::new(args.next().unwrap());
                let b = Box::new(args.next().unwrap());
                Ok(if name == "min" {
                    Expr::Min(a, b)
                } else {
                    Expr::Max(a, b)
                })
            }
            "clamp" => {
                let mut args = self.args(name, start, 3)?.into_iter();
                Ok(Expr::Clamp(
                    Box::new(args.next().unwrap()),
                    Box::new(args.next().unwrap()),
                    Box::new(args.next().unwrap()),
                ))
            }
            _ => Err(Error::parse(
                start,
                format!("unknown identifier '{name}' (expected t, w, or a function)"),
            )),
        }
    }

    fn args<R: Real>(&mut self, name: &str, at: usize, n: usize) -> Result<Vec<Expr<R>>> {
        if !self.eat(b'(') {
            return Err(Error::parse(at, format!("'{name}' requires arguments")));
        }
        let mut out = Vec::with_capacity(n);
        loop {
            out.push(self.expr()?);
            if !self.eat(b',') {
                break;
            }
        }
        self.expect(b')')?;
        if out.len() != n {
            return Err(Error::parse(
                at,
                format!("'{name}' takes {n} argument(s), got {}", out.len()),
            ));
        }
        Ok(out)
    }
}
