//! Averages over hyperplanes through the origin of Euler characteristics of
//! sections of `f = t`.
//!
//! For `n = 2` a section is a line and the value is
//! `chi({f >= t} ∩ H) - chi({f <= t} ∩ H)`, computed exactly from the real
//! roots of the restriction. For `n = 3` it is `chi(f^{-1}(t) ∩ H)`, read off
//! the traced section curve. The measure on hyperplanes has total mass one.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Family;
use crate::poly::Polynomial;
use crate::rng::{self, domain};
use crate::sample::trace_level_curve;
use crate::vecops::householder_complement;

/// Grid cells per box side when tracing plane sections.
pub const SECTION_CELLS: usize = 96;
/// Attempts per draw before a failed section is given up.
pub const REDRAWS: u64 = 8;
/// A critical value of the restriction within this (relative) distance of
/// `t` counts as a tangency.
const TANGENCY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
}

/// Uniform hyperplane through the origin. The normal is canonical up to
/// sign: its last non-zero coordinate is positive.
pub fn random_hyperplane(n: usize, seed: u64, index: u64) -> Hyperplane {
    hyperplane_attempt(n, seed, index, 0)
}

fn hyperplane_attempt(n: usize, seed: u64, index: u64, attempt: u64) -> Hyperplane {
    let mut g = rng::stream(seed, domain::HYPERPLANE, index, attempt);
    let mut v = rng::unit_vector(&mut g, n.max(1));
    if let Some(&last) = v.iter().rev().find(|c| **c != 0.0) {
        if last < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
    }
    Hyperplane { normal: v }
}

// ---------------------------------------------------------------------------
// Univariate roots
// ---------------------------------------------------------------------------

/// Coefficients (constant first) of `f(s d)` for a direction `d`.
fn restrict_to_line(f: &Polynomial, d: &[f64]) -> Vec<f64> {
    let n = f.nvars();
    let mut c = vec![0.0; f.degree() as usize + 1];
    for term in f.terms() {
        let e = &term.exps.0;
        let mut v = term.coeff;
        let mut k = 0;
        for i in 0..n {
            v *= d[i].powi(e[i] as i32);
            k += e[i] as usize;
        }
        c[k] += v;
    }
    while c.len() > 1 && c[c.len() - 1] == 0.0 {
        c.pop();
    }
    c
}

fn horner(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * s + a)
}

fn horner_scale(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * s.abs() + a.abs()).max(f64::MIN_POSITIVE)
}

fn derivative(c: &[f64]) -> Vec<f64> {
    if c.len() <= 1 {
        return vec![0.0];
    }
    c.iter().enumerate().skip(1).map(|(k, &a)| k as f64 * a).collect()
}

/// Sorted simple real roots of the polynomial with coefficients `c`.
/// Fails when `c` vanishes identically or has a (numerically) multiple root.
pub fn real_roots(c: &[f64]) -> Result<Vec<f64>> {
    let deg = c.len() - 1;
    if deg == 0 {
        return if c[0] == 0.0 { Err(Error::RootIsolationFailure) } else { Ok(Vec::new()) };
    }
    if deg == 1 {
        return Ok(vec![-c[0] / c[1]]);
    }
    let lead = c[deg];
    let bound = 1.0 + c[..deg].iter().map(|a| (a / lead).abs()).fold(0.0, f64::max);
    let crit = real_roots_loose(&derivative(c))?;
    for &x in &crit {
        if horner(c, x).abs() <= TANGENCY_TOL * horner_scale(c, x) {
            return Err(Error::RootIsolationFailure);
        }
    }
    let mut knots = vec![-bound];
    knots.extend(crit.iter().copied().filter(|x| x.abs() < bound));
    knots.push(bound);
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        if let Some(r) = bisect(c, w[0], w[1]) {
            roots.push(r);
        }
    }
    Ok(roots)
}

/// Like [`real_roots`] but tolerant of multiple roots, for critical points.
fn real_roots_loose(c: &[f64]) -> Result<Vec<f64>> {
    let deg = c.len() - 1;
    if deg == 0 {
        return Ok(Vec::new());
    }
    if deg == 1 {
        return Ok(vec![-c[0] / c[1]]);
    }
    let lead = c[deg];
    let bound = 1.0 + c[..deg].iter().map(|a| (a / lead).abs()).fold(0.0, f64::max);
    let crit = real_roots_loose(&derivative(c))?;
    let mut knots = vec![-bound];
    knots.extend(crit.iter().copied().filter(|x| x.abs() < bound));
    knots.push(bound);
    let mut roots: Vec<f64> = Vec::new();
    for w in knots.windows(2) {
        let r = bisect(c, w[0], w[1]).or_else(|| {
            // touching root at a knot
            let x = w[1];
            (horner(c, x).abs() <= TANGENCY_TOL * horner_scale(c, x) && x.abs() < bound).then_some(x)
        });
        if let Some(r) = r {
            if roots.last().is_none_or(|&l| (r - l).abs() > 1e-12 * (1.0 + r.abs())) {
                roots.push(r);
            }
        }
    }
    Ok(roots)
}

fn bisect(c: &[f64], mut lo: f64, mut hi: f64) -> Option<f64> {
    let mut flo = horner(c, lo);
    let fhi = horner(c, hi);
    if flo == 0.0 {
        return None;
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = horner(c, mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

/// Euler-characteristic functional of the section of `f = t` by `h`.
pub fn euler_of_section(f: &Polynomial, t: f64, h: &Hyperplane, box_radius: f64) -> Result<i64> {
    let n = f.nvars();
    if f.t_degree() != 0 {
        return Err(Error::InvalidArgument("section functions must not depend on t".into()));
    }
    if h.normal.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: h.normal.len(),
        });
    }
    match n {
        2 => {
            let d = [-h.normal[1], h.normal[0]];
            let mut c = restrict_to_line(f, &d);
            c[0] -= t;
            let roots = real_roots(&c)?;
            // signs alternate across simple roots; count the intervals of each sign
            let k = roots.len() as i64;
            let lead_sign = c[c.len() - 1].signum();
            let positive_at_inf = lead_sign > 0.0;
            let intervals = k + 1;
            let (pos, neg) = if intervals % 2 == 1 {
                if positive_at_inf {
                    (intervals / 2 + 1, intervals / 2)
                } else {
                    (intervals / 2, intervals / 2 + 1)
                }
            } else {
                (intervals / 2, intervals / 2)
            };
            Ok(pos - neg)
        }
        3 => {
            let basis = householder_complement(&h.normal);
            let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![basis[0][i], basis[1][i]]).collect();
            let g = f.compose_linear(&rows);
            let fam = Family::new(&g - &Polynomial::var(2, 2));
            let cell = 2.0 * box_radius / SECTION_CELLS as f64;
            let pls = trace_level_curve(&fam, t, box_radius, cell)?;
            Ok(pls.iter().filter(|p| !p.closed).count() as i64)
        }
        got => Err(Error::UnsupportedDimension {
            expected: "2 or 3",
            got,
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EulerAverages {
    pub tgrid: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Sections that needed a redraw, per grid point.
    pub failures: Vec<usize>,
}

impl EulerAverages {
    /// CSV with columns `t,mean,stderr,failures`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean,stderr,failures\n");
        for i in 0..self.tgrid.len() {
            let _ = writeln!(
                s,
                "{:?},{:?},{:?},{}",
                self.tgrid[i], self.mean[i], self.stderr[i], self.failures[i]
            );
        }
        s
    }
}

/// Mean of [`euler_of_section`] over `draws` hyperplanes, the same hyperplanes
/// for every grid value. A failed section is retried with a fresh hyperplane
/// for that draw and grid value only.
pub fn average_euler(f: &Polynomial, tgrid: &[f64], draws: usize, box_radius: f64, seed: u64) -> Result<EulerAverages> {
    let n = f.nvars();
    if !(2..=3).contains(&n) {
        return Err(Error::UnsupportedDimension {
            expected: "2 or 3",
            got: n,
        });
    }
    if f.t_degree() != 0 {
        return Err(Error::InvalidArgument("section functions must not depend on t".into()));
    }
    // per draw: per grid value (value or None, failures)
    let per_draw: Vec<Vec<(Option<i64>, usize)>> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            tgrid
                .iter()
                .map(|&t| {
                    let mut fails = 0;
                    for attempt in 0..REDRAWS {
                        let h = hyperplane_attempt(n, seed, i, attempt);
                        match euler_of_section(f, t, &h, box_radius) {
                            Ok(v) => return (Some(v), fails),
                            Err(_) => fails += 1,
                        }
                    }
                    (None, fails)
                })
                .collect()
        })
        .collect();
    let m = tgrid.len();
    let mut mean = vec![0.0; m];
    let mut stderr = vec![0.0; m];
    let mut failures = vec![0; m];
    for j in 0..m {
        let vals: Vec<f64> = per_draw.iter().filter_map(|d| d[j].0).map(|v| v as f64).collect();
        failures[j] = per_draw.iter().map(|d| d[j].1).sum();
        let k = vals.len();
        if k == 0 {
            mean[j] = f64::NAN;
            stderr[j] = f64::NAN;
            continue;
        }
        let mu = vals.iter().sum::<f64>() / k as f64;
        let var = if k > 1 {
            vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        mean[j] = mu;
        stderr[j] = (var / k as f64).sqrt();
    }
    Ok(EulerAverages {
        tgrid: tgrid.to_vec(),
        mean,
        stderr,
        failures,
    })
}
