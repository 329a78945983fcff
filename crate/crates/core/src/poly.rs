//! Sparse multivariate polynomials in `x1..xn` and the family parameter `t`.
//!
//! Exponent tuples have `nvars + 1` slots; the last slot always belongs to `t`.
//! Terms are kept merged, zero-free and sorted in descending graded
//! lexicographic order, so structural equality is polynomial equality.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Exponent tuple ordered by total degree, then lexicographically (x1 first).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub coeff: f64,
    pub exps: Monomial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: Vec<Term>,
}

/// A point `(x, t)` of `R^n x R`.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: Vec<f64>,
    pub t: f64,
}

impl Point {
    pub fn new(x: Vec<f64>, t: f64) -> Self {
        Self { x, t }
    }

    pub fn radius(&self) -> f64 {
        crate::vecops::norm(&self.x)
    }

    /// Coordinates `(x1, .., xn, t)`.
    pub fn to_full(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.push(self.t);
        z
    }

    pub fn from_full(z: &[f64]) -> Self {
        let n = z.len() - 1;
        Self {
            x: z[..n].to_vec(),
            t: z[n],
        }
    }
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: Vec::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::from_terms(nvars, vec![(c, vec![0; nvars + 1])])
    }

    /// The coordinate function of slot `i` (`0..nvars` for `x`, `nvars` for `t`).
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars + 1];
        e[i] = 1;
        Self::from_terms(nvars, vec![(1.0, e)])
    }

    /// Builds a normalized polynomial: duplicate exponents merged, zeros pruned.
    ///
    /// Panics if an exponent tuple does not have `nvars + 1` entries.
    pub fn from_terms(nvars: usize, terms: Vec<(f64, Vec<u32>)>) -> Self {
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (c, e) in terms {
            assert_eq!(e.len(), nvars + 1, "exponent tuple length");
            *acc.entry(Monomial(e)).or_insert(0.0) += c;
        }
        Self::from_map(nvars, acc)
    }

    fn from_map(nvars: usize, acc: BTreeMap<Monomial, f64>) -> Self {
        let terms = acc
            .into_iter()
            .rev()
            .filter(|(_, c)| *c != 0.0)
            .map(|(exps, coeff)| Term { coeff, exps })
            .collect();
        Self { nvars, terms }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.exps.degree()).max().unwrap_or(0)
    }

    /// Degree in the parameter slot.
    pub fn t_degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.exps.0[self.nvars])
            .max()
            .unwrap_or(0)
    }

    /// Evaluates at full coordinates `(x1, .., xn, t)` without a length check.
    #[inline]
    pub fn eval_full(&self, z: &[f64]) -> f64 {
        let mut s = 0.0;
        for term in &self.terms {
            let mut v = term.coeff;
            for (zi, &e) in z.iter().zip(&term.exps.0) {
                if e != 0 {
                    v *= zi.powi(e as i32);
                }
            }
            s += v;
        }
        s
    }

    /// Value at `q`, term by term.
    pub fn eval(&self, q: &Point) -> Result<f64> {
        if q.x.len() != self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                got: q.x.len(),
            });
        }
        Ok(self.eval_at(&q.x, q.t))
    }

    /// Evaluates at `(x, t)`; `x` must have length `nvars`.
    #[inline]
    pub fn eval_at(&self, x: &[f64], t: f64) -> f64 {
        debug_assert_eq!(x.len(), self.nvars);
        let mut s = 0.0;
        let n = self.nvars;
        for term in &self.terms {
            let e = &term.exps.0;
            let mut v = term.coeff;
            for i in 0..n {
                if e[i] != 0 {
                    v *= x[i].powi(e[i] as i32);
                }
            }
            if e[n] != 0 {
                v *= t.powi(e[n] as i32);
            }
            s += v;
        }
        s
    }

    /// Formal partial derivative with respect to slot `i`.
    pub fn derivative(&self, i: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|term| term.exps.0[i] > 0)
            .map(|term| {
                let mut e = term.exps.0.clone();
                let k = e[i];
                e[i] -= 1;
                (term.coeff * f64::from(k), e)
            })
            .collect();
        Self::from_terms(self.nvars, terms)
    }

    /// `(dF/dx1, .., dF/dxn, dF/dt)`.
    pub fn grad(&self) -> Vec<Self> {
        (0..=self.nvars).map(|i| self.derivative(i)).collect()
    }

    /// Matrix of second partials, `(n+1) x (n+1)`, symmetric term for term.
    pub fn hessian(&self) -> Vec<Vec<Self>> {
        let g = self.grad();
        let m = self.nvars + 1;
        let mut h: Vec<Vec<Self>> = vec![vec![Self::zero(self.nvars); m]; m];
        for i in 0..m {
            for j in i..m {
                let d = g[i].derivative(j);
                h[j][i] = d.clone();
                h[i][j] = d;
            }
        }
        h
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(self.nvars);
        }
        Self {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    coeff: t.coeff * c,
                    exps: t.exps.clone(),
                })
                .filter(|t| t.coeff != 0.0)
                .collect(),
        }
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut acc = Self::constant(self.nvars, 1.0);
        let mut base = self.clone();
        let mut k = k;
        while k > 0 {
            if k & 1 == 1 {
                acc = &acc * &base;
            }
            k >>= 1;
            if k > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// Substitutes `x_i = sum_j rows[i][j] * y_j` and keeps `t`; the result has
    /// `rows[0].len()` x-variables.
    pub fn compose_linear(&self, rows: &[Vec<f64>]) -> Self {
        assert_eq!(rows.len(), self.nvars);
        let m = rows.first().map_or(0, |r| r.len());
        let lin: Vec<Self> = rows
            .iter()
            .map(|row| {
                let terms = row
                    .iter()
                    .enumerate()
                    .map(|(j, &a)| {
                        let mut e = vec![0; m + 1];
                        e[j] = 1;
                        (a, e)
                    })
                    .collect();
                Self::from_terms(m, terms)
            })
            .collect();
        let mut out = Self::zero(m);
        for term in &self.terms {
            let e = &term.exps.0;
            let mut tpow = vec![0; m + 1];
            tpow[m] = e[self.nvars];
            let mut p = Self::from_terms(m, vec![(term.coeff, tpow)]);
            for (i, l) in lin.iter().enumerate() {
                if e[i] > 0 {
                    p = &p * &l.pow(e[i]);
                }
            }
            out = &out + &p;
        }
        out
    }

    fn combine(&self, other: &Self, sign: f64) -> Self {
        assert_eq!(self.nvars, other.nvars, "nvars mismatch");
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for t in &self.terms {
            acc.insert(t.exps.clone(), t.coeff);
        }
        for t in &other.terms {
            *acc.entry(t.exps.clone()).or_insert(0.0) += sign * t.coeff;
        }
        Self::from_map(self.nvars, acc)
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.combine(rhs, 1.0)
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.combine(rhs, -1.0)
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        assert_eq!(self.nvars, rhs.nvars, "nvars mismatch");
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for a in &self.terms {
            for b in &rhs.terms {
                let e: Vec<u32> = a.exps.0.iter().zip(&b.exps.0).map(|(x, y)| x + y).collect();
                *acc.entry(Monomial(e)).or_insert(0.0) += a.coeff * b.coeff;
            }
        }
        Polynomial::from_map(self.nvars, acc)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, term) in self.terms.iter().enumerate() {
            let c = term.coeff;
            let mag = c.abs();
            if k == 0 {
                if c < 0.0 {
                    write!(f, "-")?;
                }
            } else if c < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let mut factors: Vec<String> = Vec::new();
            let is_const = term.exps.degree() == 0;
            if mag != 1.0 || is_const {
                factors.push(format!("{mag:?}"));
            }
            for (i, &e) in term.exps.0.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let name = if i == self.nvars {
                    "t".to_string()
                } else {
                    format!("x{}", i + 1)
                };
                if e == 1 {
                    factors.push(name);
                } else {
                    factors.push(format!("{name}^{e}"));
                }
            }
            write!(f, "{}", factors.join("*"))?;
        }
        Ok(())
    }
}

/// Parses a polynomial in `x1..x{nvars}` and `t`.
///
/// Grammar: `expr := term (('+'|'-') term)*`, `term := unary ('*' unary)*`,
/// `unary := ('-'|'+') unary | power`, `power := atom ('^' integer)?`,
/// `atom := number | variable | '(' expr ')'`. Whitespace is ignored.
pub fn parse(text: &str, nvars: usize) -> Result<Polynomial> {
    if nvars == 0 {
        return Err(Error::InvalidArgument("nvars must be at least 1".into()));
    }
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        nvars,
    };
    p.skip_ws();
    if p.pos >= p.src.len() {
        return Err(p.err("empty expression"));
    }
    let poly = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err(&format!("unexpected character `{}`", p.src[p.pos] as char)));
    }
    Ok(poly)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nvars: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Polynomial> {
        let mut acc = self.term()?;
        while let Some(c) = self.peek() {
            match c {
                b'+' => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = &acc + &rhs;
                }
                b'-' => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = &acc - &rhs;
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Polynomial> {
        let mut acc = self.unary()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            let rhs = self.unary()?;
            acc = &acc * &rhs;
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-&self.unary()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.err("expected a non-negative integer exponent"));
            }
            let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
            let k: u32 = digits.parse().map_err(|_| Error::Syntax {
                pos: start,
                msg: "exponent too large".into(),
            })?;
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial> {
        let Some(c) = self.peek() else {
            return Err(self.err("unexpected end of input"));
        };
        match c {
            b'(' => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            b't' => {
                self.pos += 1;
                if self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    return Err(self.err("unknown identifier"));
                }
                Ok(Polynomial::var(self.nvars, self.nvars))
            }
            b'x' => {
                let start = self.pos;
                self.pos += 1;
                let dstart = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                if dstart == self.pos {
                    return Err(Error::Syntax {
                        pos: start,
                        msg: "expected variable index after `x`".into(),
                    });
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                let idx: usize = name[1..].parse().unwrap_or(usize::MAX);
                if idx == 0 || idx > self.nvars {
                    return Err(Error::VariableOutOfRange {
                        pos: start,
                        name: name.to_string(),
                        nvars: self.nvars,
                    });
                }
                Ok(Polynomial::var(self.nvars, idx - 1))
            }
            b'0'..=b'9' | b'.' => self.number(),
            other => Err(self.err(&format!("unexpected character `{}`", other as char))),
        }
    }

    fn number(&mut self) -> Result<Polynomial> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            let dstart = self.pos;
            while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if dstart == self.pos {
                self.pos = save;
            }
        }
        let lit = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        let v: f64 = lit.parse().map_err(|_| Error::Syntax {
            pos: start,
            msg: format!("malformed number `{lit}`"),
        })?;
        Ok(Polynomial::constant(self.nvars, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exps(p: &Polynomial) -> Vec<Vec<u32>> {
        p.terms().iter().map(|t| t.exps.0.clone()).collect()
    }

    #[test]
    fn parse_reads_terms() {
        let p = parse("x1^2*x2 + x1 - t", 2).unwrap();
        let mut e = exps(&p);
        e.sort();
        assert_eq!(e, vec![vec![0, 0, 1], vec![1, 0, 0], vec![2, 1, 0]]);
        assert_eq!(p.terms().len(), 3);
    }

    #[test]
    fn parse_cancels_to_zero() {
        let p = parse("0*x1 + x1 - x1", 1).unwrap();
        assert!(p.is_zero());
        assert_eq!(p.eval_at(&[3.0], 1.0), 0.0);
    }

    #[test]
    fn parse_rejects_out_of_range_variables() {
        assert!(matches!(
            parse("x3", 2),
            Err(Error::VariableOutOfRange { pos: 0, .. })
        ));
        assert!(matches!(
            parse("x1 + x0", 2),
            Err(Error::VariableOutOfRange { pos: 5, .. })
        ));
    }

    #[test]
    fn parse_reports_syntax_positions() {
        match parse("x1 + * x2", 2) {
            Err(Error::Syntax { pos, .. }) => assert_eq!(pos, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("x1^", 1), Err(Error::Syntax { .. })));
        assert!(matches!(parse("(x1 + 1", 1), Err(Error::Syntax { .. })));
        assert!(matches!(parse("", 1), Err(Error::Syntax { .. })));
        assert!(matches!(parse("y", 1), Err(Error::Syntax { .. })));
        assert!(matches!(parse("x1^-2", 1), Err(Error::Syntax { .. })));
    }

    #[test]
    fn parse_handles_scientific_and_parentheses() {
        let p = parse("1.5e-1*(x1 + 2)^2 - 2E1*t", 1).unwrap();
        let v = p.eval_at(&[1.0], 0.5);
        assert!((v - (0.15 * 9.0 - 10.0)).abs() < 1e-12);
        let q = parse(" - x1 ^ 2 ", 1).unwrap();
        assert_eq!(q.eval_at(&[3.0], 0.0), -9.0);
    }

    #[test]
    fn eval_examples() {
        let p = parse("x1^2*x2 + x1 - t", 2).unwrap();
        assert_eq!(p.eval(&Point::new(vec![2.0, 1.0], 3.0)).unwrap(), 3.0);
        assert_eq!(
            Polynomial::zero(2).eval(&Point::new(vec![5.0, -1.0], 2.0)).unwrap(),
            0.0
        );
        let s = parse("x1^2+x2^2-t", 2).unwrap();
        assert_eq!(s.eval(&Point::new(vec![1.0, 0.0], 1.0)).unwrap(), 0.0);
        assert!(matches!(
            s.eval(&Point::new(vec![1.0], 1.0)),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn grad_examples() {
        let p = parse("x1^2*x2 + x1 - t", 2).unwrap();
        let g = p.grad();
        assert_eq!(g[0], parse("2*x1*x2 + 1", 2).unwrap());
        assert_eq!(g[1], parse("x1^2", 2).unwrap());
        assert_eq!(g[2], Polynomial::constant(2, -1.0));

        let c = Polynomial::constant(3, 4.0);
        assert!(c.grad().iter().all(Polynomial::is_zero));

        let s = parse("x1^2+x2^2-t", 2).unwrap().grad();
        assert_eq!(s[0], parse("2*x1", 2).unwrap());
        assert_eq!(s[1], parse("2*x2", 2).unwrap());
        assert_eq!(s[2], parse("-1", 2).unwrap());
    }

    #[test]
    fn hessian_examples() {
        let h = parse("x1^2+x2^2-t", 2).unwrap().hessian();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j && i < 2 { 2.0 } else { 0.0 };
                assert_eq!(h[i][j], Polynomial::constant(2, expect));
            }
        }
        let h = parse("x1*x2", 2).unwrap().hessian();
        assert_eq!(h[0][1], Polynomial::constant(2, 1.0));
        assert_eq!(h[1][0], Polynomial::constant(2, 1.0));
        assert!(h[0][0].is_zero() && h[1][1].is_zero() && h[2][2].is_zero());
        let h = parse("3*x1 - 2*x2 + t + 7", 2).unwrap().hessian();
        assert!(h.iter().flatten().all(Polynomial::is_zero));
    }

    #[test]
    fn display_is_grlex_descending() {
        let p = parse("t - x1 + x1^2*x2", 2).unwrap();
        assert_eq!(p.to_string(), "x1^2*x2 - x1 + t");
        assert_eq!(parse("-2.5 + x1", 1).unwrap().to_string(), "x1 - 2.5");
        assert_eq!(Polynomial::zero(1).to_string(), "0");
    }

    #[test]
    fn compose_linear_matches_direct_evaluation() {
        let p = parse("x1^2*x2 + x3 - t", 3).unwrap();
        let rows = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![0.0, 3.0]];
        let q = p.compose_linear(&rows);
        assert_eq!(q.nvars(), 2);
        let (a, b, t) = (0.3, -0.7, 0.2);
        let x: Vec<f64> = rows.iter().map(|r| r[0] * a + r[1] * b).collect();
        assert!((q.eval_at(&[a, b], t) - p.eval_at(&x, t)).abs() < 1e-12);
    }
}
