//! Modular arithmetic expressions over digits `0..5` with `+`, `-`, `*`,
//! unary minus and parentheses, generated at an exact token length.

use rand::Rng;

use crate::error::{Error, Result};

pub const MODULUS: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sym {
    Digit(u8),
    Plus,
    Minus,
    Times,
    Open,
    Close,
    X,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Digit(u8),
    Neg(Box<Expr>),
    Paren(Box<Expr>),
    Bin(Box<Expr>, Sym, Box<Expr>),
}

impl Expr {
    pub fn eval(&self) -> i64 {
        match self {
            Expr::Digit(d) => *d as i64,
            Expr::Neg(e) => (-e.eval()).rem_euclid(MODULUS),
            Expr::Paren(e) => e.eval(),
            Expr::Bin(a, op, b) => {
                let (x, y) = (a.eval(), b.eval());
                match op {
                    Sym::Plus => (x + y).rem_euclid(MODULUS),
                    Sym::Minus => (x - y).rem_euclid(MODULUS),
                    Sym::Times => (x * y).rem_euclid(MODULUS),
                    _ => unreachable!("binary nodes hold arithmetic operators"),
                }
            }
        }
    }

    pub fn write(&self, out: &mut Vec<Sym>) {
        match self {
            Expr::Digit(d) => out.push(Sym::Digit(*d)),
            Expr::Neg(e) => {
                out.push(Sym::Minus);
                e.write(out);
            }
            Expr::Paren(e) => {
                out.push(Sym::Open);
                e.write(out);
                out.push(Sym::Close);
            }
            Expr::Bin(a, op, b) => {
                a.write(out);
                out.push(*op);
                b.write(out);
            }
        }
    }

    pub fn symbols(&self) -> Vec<Sym> {
        let mut v = Vec::new();
        self.write(&mut v);
        v
    }
}

#[derive(Clone, Copy)]
enum Nt {
    /// Sum of terms.
    E,
    /// Product of factors.
    T,
    /// Digit, negation or parenthesized sum.
    F,
}

/// Random expression with exactly `len` symbols.
///
/// Every length is reachable (e.g. `--3` has length 3), so each
/// nonterminal picks uniformly among its productions that fit the
/// remaining length, then uniformly among valid split points.
pub fn generate<R: Rng>(len: usize, rng: &mut R) -> Result<Expr> {
    if len == 0 {
        return Err(Error::UnsupportedLength {
            len,
            reason: "expressions need at least one symbol".into(),
        });
    }
    Ok(gen(Nt::E, len, rng))
}

fn gen<R: Rng>(nt: Nt, len: usize, rng: &mut R) -> Expr {
    match nt {
        Nt::E | Nt::T => {
            // A binary node needs at least one symbol on each side.
            let mut opts = vec![None];
            if len >= 3 {
                match nt {
                    Nt::E => opts.extend([Some(Sym::Plus), Some(Sym::Minus)]),
                    _ => opts.push(Some(Sym::Times)),
                }
            }
            let next = if matches!(nt, Nt::E) { Nt::T } else { Nt::F };
            match opts[rng.gen_range(0..opts.len())] {
                None => gen(next, len, rng),
                Some(op) => {
                    let left = rng.gen_range(1..=len - 2);
                    let a = gen(nt, left, rng);
                    let b = gen(next, len - 1 - left, rng);
                    Expr::Bin(Box::new(a), op, Box::new(b))
                }
            }
        }
        Nt::F => {
            if len == 1 {
                return Expr::Digit(rng.gen_range(0..MODULUS as u8));
            }
            if len >= 3 && rng.gen_bool(0.5) {
                Expr::Paren(Box::new(gen(Nt::E, len - 2, rng)))
            } else {
                Expr::Neg(Box::new(gen(Nt::F, len - 1, rng)))
            }
        }
    }
}

/// Recursive-descent evaluator, written independently of [`Expr::eval`]
/// so it can serve as a checker. `x` is substituted when present.
pub fn parse_eval(syms: &[Sym], x: Option<i64>) -> Result<i64> {
    let mut p = Parser { s: syms, i: 0, x };
    let v = p.sum()?;
    if p.i != syms.len() {
        return Err(Error::contract(format!("trailing symbols at {}", p.i)));
    }
    Ok(v)
}

struct Parser<'a> {
    s: &'a [Sym],
    i: usize,
    x: Option<i64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Sym> {
        self.s.get(self.i).copied()
    }

    fn sum(&mut self) -> Result<i64> {
        let mut acc = self.product()?;
        while let Some(op @ (Sym::Plus | Sym::Minus)) = self.peek() {
            self.i += 1;
            let rhs = self.product()?;
            acc = if op == Sym::Plus { acc + rhs } else { acc - rhs };
            acc = acc.rem_euclid(MODULUS);
        }
        Ok(acc)
    }

    fn product(&mut self) -> Result<i64> {
        let mut acc = self.factor()?;
        while self.peek() == Some(Sym::Times) {
            self.i += 1;
            acc = (acc * self.factor()?).rem_euclid(MODULUS);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<i64> {
        let sym = self.peek().ok_or_else(|| Error::contract("expression ends early"))?;
        self.i += 1;
        match sym {
            Sym::Digit(d) => Ok(d as i64),
            Sym::X => self.x.ok_or_else(|| Error::contract("unbound x")),
            Sym::Minus => Ok((-self.factor()?).rem_euclid(MODULUS)),
            Sym::Open => {
                let v = self.sum()?;
                if self.peek() != Some(Sym::Close) {
                    return Err(Error::contract("unbalanced parenthesis"));
                }
                self.i += 1;
                Ok(v)
            }
            other => Err(Error::contract(format!("unexpected {other:?}"))),
        }
    }
}
