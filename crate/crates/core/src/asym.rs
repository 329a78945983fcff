//! Generalized critical values of `t_M`: ordinary critical values `K0`,
//! Malgrange profiles `mu0(R)`, the horizontal-sphericalness exponent and
//! defect, and clouds of limit normals at infinity.
//!
//! Everything here is sample based. The central primitive is a projected
//! descent of `log(|x| |grad t_M|)` over a region of `M` cut out by a radius
//! interval and a level interval.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::Family;
use crate::rng::{self, domain};
use crate::vecops::{dot, norm, orthonormalize, project_out};

/// Largest box searched for critical points of `t_M`.
pub const K0_BOX_CAP: f64 = 10.0;
/// Residual bounds a `K0` witness must satisfy.
pub const K0_VALUE_TOL: f64 = 1e-9;
pub const K0_GRADIENT_TOL: f64 = 1e-7;

pub const MALGRANGE_SLOPE_MIN: f64 = -0.05;
pub const ACV_SLOPE_MAX: f64 = -0.1;
pub const GOOD_FIT_R2: f64 = 0.9;
pub const SPHERICAL_MARGIN: f64 = 0.05;
pub const DEFECT_THRESHOLD: f64 = 0.1;
/// Number of dyadic level bands `|t - c| in [eps 2^{-j-1}, eps 2^{-j}]`.
pub const LEVEL_BANDS: usize = 10;
/// The band search reaches out to this multiple of the largest radius.
pub const BAND_REACH: f64 = 10.0;

const PROJECT_ITERS: usize = 80;
const DESCENT_ITERS: usize = 300;
const CLOUD_DESCENT_EVERY: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Region {
    t_lo: f64,
    t_hi: f64,
    r_lo: f64,
    r_hi: f64,
}

impl Region {
    fn sphere(r: f64, t_lo: f64, t_hi: f64) -> Self {
        Self { t_lo, t_hi, r_lo: r, r_hi: r }
    }

    fn clamp(&self, z: &mut [f64]) -> bool {
        let n = z.len() - 1;
        z[n] = z[n].clamp(self.t_lo, self.t_hi);
        let r = norm(&z[..n]);
        if !(r > 0.0) || !r.is_finite() {
            return false;
        }
        let target = r.clamp(self.r_lo, self.r_hi);
        if target != r {
            let s = target / r;
            z[..n].iter_mut().for_each(|v| *v *= s);
        }
        true
    }

    /// Normals of the constraints that block motion along `m` at `z`.
    fn blocking(&self, z: &[f64], m: &[f64]) -> Vec<Vec<f64>> {
        let n = z.len() - 1;
        let mut out = Vec::new();
        let t = z[n];
        let t_tol = 1e-12 * (1.0 + t.abs());
        if self.t_lo == self.t_hi
            || (t <= self.t_lo + t_tol && m[n] < 0.0)
            || (t >= self.t_hi - t_tol && m[n] > 0.0)
        {
            let mut e = vec![0.0; n + 1];
            e[n] = 1.0;
            out.push(e);
        }
        let r = norm(&z[..n]);
        let radial: Vec<f64> = z[..n].iter().map(|v| v / r).chain([0.0]).collect();
        let mr = dot(&radial, m);
        let r_tol = 1e-12 * r;
        if self.r_lo == self.r_hi
            || (r <= self.r_lo + r_tol && mr < 0.0)
            || (r >= self.r_hi - r_tol && mr > 0.0)
        {
            out.push(radial);
        }
        out
    }
}

fn split(z: &[f64]) -> (&[f64], f64) {
    let n = z.len() - 1;
    (&z[..n], z[n])
}

/// Newton projection onto `M` inside `reg`, moving only along free directions.
fn project(fam: &Family, z0: &[f64], reg: &Region) -> Option<Vec<f64>> {
    let mut z = z0.to_vec();
    if !reg.clamp(&mut z) {
        return None;
    }
    for _ in 0..PROJECT_ITERS {
        let (x, t) = split(&z);
        let f = fam.value(x, t);
        let scale = fam.scale(x, t);
        if f.abs() <= 1e-13 * scale {
            return Some(z);
        }
        let mut d = fam.gradient(x, t);
        let motion: Vec<f64> = d.iter().map(|v| -f.signum() * v).collect();
        let blocked = orthonormalize(&reg.blocking(&z, &motion));
        project_out(&mut d, &blocked);
        let dd = dot(&d, &d);
        if !(dd > 0.0) || !dd.is_finite() {
            break;
        }
        let mut lam = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let mut cand: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a - lam * f / dd * b).collect();
            if reg.clamp(&mut cand) {
                let (cx, ct) = split(&cand);
                if fam.value(cx, ct).abs() < f.abs() {
                    z = cand;
                    moved = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (x, t) = split(&z);
    (fam.residual(x, t) <= 1e-10).then_some(z)
}

/// `log(|x| |d_x F| / |grad F|)` and its gradient in `(x, t)`.
fn log_phi(fam: &Family, z: &[f64]) -> f64 {
    let (x, t) = split(z);
    let g = fam.gradient(x, t);
    let n = x.len();
    norm(x).ln() + norm(&g[..n]).ln() - norm(&g).ln()
}

fn log_phi_gradient(fam: &Family, z: &[f64]) -> Vec<f64> {
    let (x, t) = split(z);
    let n = x.len();
    let b = fam.gradient(x, t);
    let h = fam.hessian(x, t);
    let a2 = dot(&b[..n], &b[..n]);
    let b2 = dot(&b, &b);
    let r2 = dot(x, x);
    (0..=n)
        .map(|k| {
            let radial = if k < n { x[k] / r2 } else { 0.0 };
            let ha: f64 = (0..n).map(|i| h[i][k] * b[i]).sum();
            let hb: f64 = (0..=n).map(|i| h[i][k] * b[i]).sum();
            radial + ha / a2 - hb / b2
        })
        .collect()
}

/// Projected descent of `log phi` from `z0` within `reg`. Returns the
/// projected start and the local minimizer with its value of `phi`.
fn descend(fam: &Family, z0: &[f64], reg: &Region) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let start = project(fam, z0, reg)?;
    let mut z = start.clone();
    let mut val = log_phi(fam, &z);
    if val == f64::NEG_INFINITY {
        return Some((start, z, 0.0));
    }
    if !val.is_finite() {
        return None;
    }
    let mut alpha = 1e-3 * norm(&z).max(1.0);
    for _ in 0..DESCENT_ITERS {
        let g = log_phi_gradient(fam, &z);
        if g.iter().any(|v| !v.is_finite()) {
            break;
        }
        let m: Vec<f64> = g.iter().map(|v| -v).collect();
        let (x, t) = split(&z);
        let mut normals = vec![fam.gradient(x, t)];
        normals.extend(reg.blocking(&z, &m));
        let basis = orthonormalize(&normals);
        let mut d = m;
        project_out(&mut d, &basis);
        let dn = norm(&d);
        if !(dn > 1e-12) {
            break;
        }
        let dir: Vec<f64> = d.iter().map(|v| v / dn).collect();
        let floor = 1e-15 * norm(&z).max(1.0);
        let mut accepted = false;
        while alpha > floor {
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
            if let Some(cand) = project(fam, &trial, reg) {
                let cv = log_phi(fam, &cand);
                if cv < val - 1e-4 * alpha * dn {
                    let gain = val - cv;
                    z = cand;
                    val = cv;
                    alpha *= 2.0;
                    accepted = gain > 1e-12 || val == f64::NEG_INFINITY;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted || val == f64::NEG_INFINITY {
            break;
        }
    }
    let phi = val.exp();
    Some((start, z, phi))
}

/// Outcome of restarts on one region.
#[derive(Clone, Debug, Default)]
struct Scan {
    /// Projected starting points.
    seeds: Vec<Vec<f64>>,
    /// Local minimizers with their `phi` values.
    minima: Vec<(Vec<f64>, f64)>,
}

impl Scan {
    fn min(&self) -> Option<f64> {
        self.minima.iter().map(|m| m.1).min_by(f64::total_cmp)
    }

    fn points(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.seeds.iter().chain(self.minima.iter().map(|m| &m.0))
    }
}

/// Restarts of the descent from seeds on spheres of the given radii.
fn scan<F>(fam: &Family, reg: &Region, restarts: usize, mut seed_at: F) -> Scan
where
    F: FnMut(usize) -> (f64, Vec<f64>, f64),
{
    let n = fam.n();
    let mut out = Scan::default();
    for j in 0..restarts {
        let (radius, u, t) = seed_at(j);
        let z0: Vec<f64> = u.iter().map(|v| v * radius).chain([t]).collect();
        let on_sphere = Region::sphere(radius, reg.t_lo, reg.t_hi);
        let Some(seed) = project(fam, &z0, &on_sphere) else {
            continue;
        };
        if let Some((start, zmin, phi)) = descend(fam, &seed, reg) {
            debug_assert_eq!(start.len(), n + 1);
            out.seeds.push(start);
            out.minima.push((zmin, phi));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// K0
// ---------------------------------------------------------------------------

/// Critical values of `t_M` with a witness in the box `[-box_radius, box_radius]^n`,
/// found by Gauss-Newton on `{F = 0, d_x F = 0}` from a grid of seeds.
/// Missed roots are possible; every returned value has a verified witness.
pub fn find_k0(fam: &Family, t_bounds: (f64, f64), box_radius: f64) -> Vec<f64> {
    let n = fam.n();
    let (tlo, thi) = (t_bounds.0.min(t_bounds.1), t_bounds.0.max(t_bounds.1));
    if !tlo.is_finite() || !thi.is_finite() {
        return Vec::new();
    }
    let per_axis: usize = match n {
        1 | 2 => 7,
        3 => 6,
        _ => 4,
    };
    let mut seeds = Vec::new();
    for scale in [box_radius, 0.1 * box_radius] {
        let axis: Vec<f64> = (0..per_axis)
            .map(|i| -scale + 2.0 * scale * (i as f64 + 0.5) / per_axis as f64)
            .collect();
        let total = per_axis.pow(n as u32);
        for idx in 0..total {
            let mut rem = idx;
            let mut x = Vec::with_capacity(n + 1);
            for _ in 0..n {
                x.push(axis[rem % per_axis]);
                rem /= per_axis;
            }
            for k in 0..5 {
                let mut z = x.clone();
                z.push(tlo + (thi - tlo) * k as f64 / 4.0);
                seeds.push(z);
            }
        }
    }
    let reach = box_radius * (1.0 + 1e-9);
    let found: Vec<f64> = seeds
        .par_iter()
        .filter_map(|z| critical_newton(fam, z))
        .filter(|w| w[..n].iter().all(|v| v.abs() <= reach))
        .map(|w| w[n])
        .filter(|&t| t >= tlo && t <= thi)
        .collect();
    let mut vals = found;
    vals.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::new();
    for v in vals {
        match out.last() {
            Some(&w) if (v - w).abs() <= 1e-7 * (1.0 + v.abs()) => {}
            _ => out.push(v),
        }
    }
    out
}

fn critical_system(fam: &Family, z: &[f64]) -> Vec<f64> {
    let (x, t) = split(z);
    let mut r = vec![fam.value(x, t)];
    r.extend(fam.x_gradient(x, t));
    r
}

fn critical_newton(fam: &Family, z0: &[f64]) -> Option<Vec<f64>> {
    let n = fam.n();
    let mut z = z0.to_vec();
    let mut res = critical_system(fam, &z);
    let mut rn = norm(&res);
    for _ in 0..60 {
        let (x, t) = split(&z);
        if res[0].abs() <= 0.01 * K0_VALUE_TOL && norm(&res[1..]) <= 0.01 * K0_GRADIENT_TOL {
            break;
        }
        let g = fam.gradient(x, t);
        let h = fam.hessian(x, t);
        let jac = DMatrix::from_fn(n + 1, n + 1, |i, j| if i == 0 { g[j] } else { h[i - 1][j] });
        let rhs = DVector::from_column_slice(&res);
        let Ok(step) = jac.svd(true, true).solve(&rhs, 1e-14) else {
            return None;
        };
        let mut lam = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a - lam * s).collect();
            let cr = critical_system(fam, &cand);
            let cn = norm(&cr);
            if cn < rn {
                z = cand;
                res = cr;
                rn = cn;
                improved = true;
                break;
            }
            lam *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let ok = res[0].abs() <= K0_VALUE_TOL && norm(&res[1..]) <= K0_GRADIENT_TOL;
    ok.then_some(z)
}

// ---------------------------------------------------------------------------
// Malgrange profile
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AcvClass {
    MalgrangeHolds,
    AcvWithExponent,
    VacuousCompact,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcvReport {
    pub c: f64,
    pub epsilon: f64,
    pub radii: Vec<f64>,
    /// Minimum of `|x| |grad t_M|` per radius; `None` when no point was found.
    pub mu0: Vec<Option<f64>>,
    pub fitted_slope: Option<f64>,
    pub classification: AcvClass,
    pub fit_r2: Option<f64>,
    /// Radii with no sample although a larger radius has one.
    pub undersampled: Vec<f64>,
    /// Every local minimum found, per radius, sorted.
    pub local_minima: Vec<Vec<f64>>,
}

impl AcvReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Least-squares line through `pts`: `(slope, intercept, r^2)`.
pub fn fit_line(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some((slope, my - slope * mx, r2))
}

/// Median of pairwise slopes. A single band whose minimum was missed (and so
/// sits far above the trend) cannot drag it.
pub fn theil_sen_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let mut slopes: Vec<f64> = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        for q in &pts[i + 1..] {
            let dx = q.0 - p.0;
            if dx != 0.0 {
                slopes.push((q.1 - p.1) / dx);
            }
        }
    }
    if slopes.is_empty() {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    let m = slopes.len();
    Some(if m % 2 == 1 { slopes[m / 2] } else { 0.5 * (slopes[m / 2 - 1] + slopes[m / 2]) })
}

fn check_slab(epsilon: f64, radii: &[f64]) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("radii must be positive and increasing".into()));
    }
    Ok(())
}

fn sphere_scan(fam: &Family, c: f64, epsilon: f64, radius: f64, restarts: usize, seed: u64, dom: u64, idx: u64) -> Scan {
    let reg = Region::sphere(radius, c - epsilon, c + epsilon);
    let n = fam.n();
    scan(fam, &reg, restarts, |j| {
        let mut g = rng::stream(seed, dom, idx, j as u64);
        let u = rng::unit_vector(&mut g, n);
        let t = c + epsilon * (2.0 * g.random::<f64>() - 1.0);
        (radius, u, t)
    })
}

/// `mu0(R) = min |x| |grad t_M|` over `{|x| = R, |t - c| <= epsilon} ∩ M`
/// for each radius, its log-log slope, and the resulting classification.
pub fn malgrange_profile(
    fam: &Family,
    c: f64,
    epsilon: f64,
    radii: &[f64],
    budget: usize,
    seed: u64,
) -> Result<AcvReport> {
    check_slab(epsilon, radii)?;
    let scans: Vec<Scan> = radii
        .par_iter()
        .enumerate()
        .map(|(i, &r)| sphere_scan(fam, c, epsilon, r, budget, seed, domain::MALGRANGE, i as u64))
        .collect();
    let mu0: Vec<Option<f64>> = scans.iter().map(Scan::min).collect();
    let local_minima = scans
        .iter()
        .map(|s| {
            let mut v: Vec<f64> = s.minima.iter().map(|m| m.1).collect();
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1e-300));
            v
        })
        .collect();

    let last_found = mu0.iter().rposition(Option::is_some);
    let undersampled = match last_found {
        Some(k) => (0..k).filter(|&i| mu0[i].is_none()).map(|i| radii[i]).collect(),
        None => Vec::new(),
    };
    let pts: Vec<(f64, f64)> = mu0
        .iter()
        .zip(radii)
        .filter_map(|(m, r)| m.filter(|v| *v > 0.0).map(|v| (r.ln(), v.ln())))
        .collect();
    let fit = fit_line(&pts);
    let min_val = mu0.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let vacuous = match last_found {
        None => true,
        Some(k) => k + 1 < mu0.len(),
    };
    let classification = if vacuous {
        AcvClass::VacuousCompact
    } else {
        match fit {
            Some((s, _, _)) if s >= MALGRANGE_SLOPE_MIN && min_val > 0.0 => AcvClass::MalgrangeHolds,
            Some((s, _, r2)) if s <= ACV_SLOPE_MAX && r2 >= GOOD_FIT_R2 => AcvClass::AcvWithExponent,
            None if min_val == 0.0 => AcvClass::AcvWithExponent,
            _ => AcvClass::Inconclusive,
        }
    };
    Ok(AcvReport {
        c,
        epsilon,
        radii: radii.to_vec(),
        mu0,
        fitted_slope: fit.map(|f| f.0),
        classification,
        fit_r2: fit.map(|f| f.2),
        undersampled,
        local_minima,
    })
}

// ---------------------------------------------------------------------------
// Sphericalness
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Spherical,
    NotSpherical,
    VacuousCompact,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SphericalnessReport {
    pub c: f64,
    /// Fitted exponent in `|x| |grad t_M| >= E |t_M - c|^{e_c}`; `None` without far samples.
    pub ec_estimate: Option<f64>,
    pub defect: f64,
    pub verdict: Verdict,
    /// Minimum of `|x| |grad t_M|` per dyadic band of `|t - c|`, nearest band last.
    pub band_minima: Vec<Option<f64>>,
}

impl SphericalnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `|<x/|x|, N>|` at a point of `M`, when the Gauss map is defined.
fn alignment(fam: &Family, z: &[f64]) -> Option<f64> {
    let (x, t) = split(z);
    let a = fam.x_gradient(x, t);
    let an = norm(&a);
    let r = norm(x);
    (an > 1e-300 && r > 0.0).then(|| (dot(x, &a) / (an * r)).abs().min(1.0))
}

/// Exponent and defect of horizontal sphericalness at infinity at `c`.
pub fn sphericalness_report(
    fam: &Family,
    c: f64,
    epsilon: f64,
    radii: &[f64],
    budget: usize,
    seed: u64,
) -> Result<SphericalnessReport> {
    check_slab(epsilon, radii)?;
    let k0 = find_k0(fam, (c - epsilon, c + epsilon), K0_BOX_CAP);
    if k0.iter().any(|v| (v - c).abs() <= 1e-7 * (1.0 + c.abs())) {
        return Err(Error::InvalidArgument(format!("{c} is a critical value of t_M")));
    }
    let n = fam.n();
    let r_min = radii[0];
    let r_max = *radii.last().expect("non-empty radii");
    let r_far = BAND_REACH * r_max;

    let jobs: Vec<(usize, f64)> = (0..LEVEL_BANDS).flat_map(|j| [(j, -1.0), (j, 1.0)]).collect();
    let band_scans: Vec<Option<f64>> = jobs
        .par_iter()
        .enumerate()
        .map(|(job, &(j, side))| {
            let d = epsilon * 0.5f64.powi(j as i32);
            let (a, b) = (c + side * 0.5 * d, c + side * d);
            let reg = Region { t_lo: a.min(b), t_hi: a.max(b), r_lo: r_min, r_hi: r_far };
            let s = scan(fam, &reg, budget, |k| {
                let mut g = rng::stream(seed, domain::SPHERICAL, job as u64, k as u64);
                let frac = (k as f64 + g.random::<f64>()) / budget.max(1) as f64;
                let radius = r_min * (r_far / r_min).powf(frac);
                let u = rng::unit_vector(&mut g, n);
                let t = reg.t_lo + (reg.t_hi - reg.t_lo) * g.random::<f64>();
                (radius, u, t)
            });
            s.min()
        })
        .collect();
    let band_minima: Vec<Option<f64>> = (0..LEVEL_BANDS)
        .map(|j| match (band_scans[2 * j], band_scans[2 * j + 1]) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        })
        .collect();

    let outer = sphere_scan(fam, c, epsilon, r_max, budget, seed, domain::SPHERICAL, u64::MAX);
    let defect = outer
        .points()
        .filter_map(|z| alignment(fam, z))
        .fold(0.0f64, f64::max);
    let far_samples = band_minima.iter().any(Option::is_some) || !outer.seeds.is_empty();

    let near: Vec<(f64, f64)> = (LEVEL_BANDS / 2..LEVEL_BANDS)
        .filter_map(|j| {
            let d = epsilon * 0.5f64.powi(j as i32 + 1);
            band_minima[j].filter(|m| *m > 0.0).map(|m| (d.ln(), m.ln()))
        })
        .collect();
    let ec_estimate = theil_sen_slope(&near).or_else(|| {
        let all: Vec<(f64, f64)> = (0..LEVEL_BANDS)
            .filter_map(|j| {
                let d = epsilon * 0.5f64.powi(j as i32 + 1);
                band_minima[j].filter(|m| *m > 0.0).map(|m| (d.ln(), m.ln()))
            })
            .collect();
        theil_sen_slope(&all)
    });

    let verdict = if !far_samples {
        Verdict::VacuousCompact
    } else {
        match ec_estimate {
            Some(e) if e < 1.0 - SPHERICAL_MARGIN && defect <= DEFECT_THRESHOLD => Verdict::Spherical,
            Some(e) if e >= 1.0 - SPHERICAL_MARGIN && defect > DEFECT_THRESHOLD => Verdict::NotSpherical,
            _ => Verdict::Inconclusive,
        }
    };
    Ok(SphericalnessReport {
        c,
        ec_estimate,
        defect,
        verdict,
        band_minima,
    })
}

// ---------------------------------------------------------------------------
// Limit normals
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CloudPair {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub radius: f64,
    pub tval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalCloud {
    pub n: usize,
    pub pairs: Vec<CloudPair>,
    /// Fraction of the sphere grid cells hit by some `v`.
    pub occupancy: f64,
    pub grid_h: f64,
}

impl NormalCloud {
    /// No far points: the pencil is compact near `c`.
    pub fn is_vacuous(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn defect(&self) -> f64 {
        self.pairs
            .iter()
            .map(|p| dot(&p.u, &p.v).abs().min(1.0))
            .fold(0.0, f64::max)
    }

    pub fn u_cells(&self) -> BTreeSet<Vec<i64>> {
        self.pairs.iter().map(|p| sphere_cell(&p.u, self.grid_h)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let cols: Vec<String> = (1..=self.n)
            .map(|i| format!("u{i}"))
            .chain((1..=self.n).map(|i| format!("v{i}")))
            .chain(["radius".to_string(), "tval".to_string()])
            .collect();
        s.push_str(&cols.join(","));
        s.push('\n');
        for p in &self.pairs {
            let vals: Vec<String> = p
                .u
                .iter()
                .chain(&p.v)
                .chain([&p.radius, &p.tval])
                .map(|v| format!("{v:?}"))
                .collect();
            let _ = writeln!(s, "{}", vals.join(","));
        }
        s
    }
}

/// Pairs `(x/|x|, N)` from points of `M` with `|x| in [r_min, 10 r_min]` and
/// `|t - c| <= epsilon` (`epsilon = 0` samples the level `c` itself).
pub fn limit_normal_cloud(
    fam: &Family,
    c: f64,
    epsilon: f64,
    r_min: f64,
    budget: usize,
    seed: u64,
    grid_h: f64,
) -> Result<NormalCloud> {
    if !(r_min > 0.0) || !(grid_h > 0.0) || !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument("r_min and grid_h must be positive".into()));
    }
    let n = fam.n();
    let slab = Region::sphere(1.0, c - epsilon, c + epsilon);
    let pair_at = |z: &[f64]| -> Option<CloudPair> {
        let (x, tv) = split(z);
        let a = fam.x_gradient(x, tv);
        let an = norm(&a);
        let r = norm(x);
        (an > 1e-300).then(|| CloudPair {
            u: x.iter().map(|v| v / r).collect(),
            v: a.iter().map(|v| v / an).collect(),
            radius: r,
            tval: tv,
        })
    };
    let pairs: Vec<CloudPair> = (0..budget)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut g = rng::stream(seed, domain::CLOUD, j as u64, 0);
            let u0 = rng::unit_vector(&mut g, n);
            let radius = r_min * 10f64.powf(g.random::<f64>());
            let t = c + epsilon * (2.0 * g.random::<f64>() - 1.0);
            let z0: Vec<f64> = u0.iter().map(|v| v * radius).chain([t]).collect();
            let mut out = Vec::new();
            if let Some(z) = project(fam, &z0, &Region::sphere(radius, t, t)) {
                out.extend(pair_at(&z));
                // A share of the draws also follows the descent of |x| |grad t_M|
                // inside the slab, which reaches the normals that survive in the limit.
                if epsilon > 0.0 && j % CLOUD_DESCENT_EVERY == 0 {
                    let reg = Region { r_lo: radius, r_hi: radius, ..slab };
                    if let Some((_, zmin, _)) = descend(fam, &z, &reg) {
                        out.extend(pair_at(&zmin));
                    }
                }
            }
            out
        })
        .collect();
    let cells: BTreeSet<Vec<i64>> = pairs.iter().map(|p| sphere_cell(&p.v, grid_h)).collect();
    let occupancy = cells.len() as f64 / sphere_cell_count(n, grid_h) as f64;
    Ok(NormalCloud { n, pairs, occupancy, grid_h })
}

/// Cell of a unit vector on a grid of the sphere `S^{n-1}` with angular
/// resolution about `h`: arcs on the circle, latitude-longitude bands on
/// `S^2`, and a cube-sphere grid above.
pub fn sphere_cell(v: &[f64], h: f64) -> Vec<i64> {
    match v.len() {
        1 => vec![if v[0] >= 0.0 { 1 } else { -1 }],
        2 => {
            let m = (2.0 * PI / h).ceil();
            let th = v[1].atan2(v[0]) + PI;
            vec![((th / (2.0 * PI) * m).floor() as i64).clamp(0, m as i64 - 1)]
        }
        3 => {
            let bands = (PI / h).ceil();
            let polar = v[2].clamp(-1.0, 1.0).acos();
            let b = ((polar / PI * bands).floor() as i64).clamp(0, bands as i64 - 1);
            let m = band_cells(b, bands, h);
            let az = v[1].atan2(v[0]) + PI;
            let a = ((az / (2.0 * PI) * m as f64).floor() as i64).clamp(0, m - 1);
            vec![b, a]
        }
        n => {
            let k = (0..n).max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs())).unwrap_or(0);
            let m = (2.0 / h).ceil();
            let mut cell = vec![k as i64, if v[k] >= 0.0 { 1 } else { -1 }];
            for (i, &vi) in v.iter().enumerate() {
                if i != k {
                    let w = vi / v[k].abs();
                    cell.push((((w + 1.0) / 2.0 * m).floor() as i64).clamp(0, m as i64 - 1));
                }
            }
            cell
        }
    }
}

fn band_cells(b: i64, bands: f64, h: f64) -> i64 {
    let mid = (b as f64 + 0.5) / bands * PI;
    ((2.0 * PI * mid.sin() / h).ceil() as i64).max(1)
}

pub fn sphere_cell_count(n: usize, h: f64) -> usize {
    match n {
        1 => 2,
        2 => (2.0 * PI / h).ceil() as usize,
        3 => {
            let bands = (PI / h).ceil();
            (0..bands as i64).map(|b| band_cells(b, bands, h) as usize).sum()
        }
        _ => 2 * n * ((2.0 / h).ceil() as usize).pow(n as u32 - 1),
    }
}

/// Every vector of `a` lies within `angle` of some vector of `b`.
pub fn directions_covered(a: &[Vec<f64>], b: &[Vec<f64>], angle: f64) -> bool {
    let cos = angle.cos();
    a.iter().all(|u| b.iter().any(|w| dot(u, w) >= cos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere() -> Family {
        Family::parse("x1^2 + x2^2 - t", 2).unwrap()
    }
    fn linear() -> Family {
        Family::parse("x1 - t", 2).unwrap()
    }
    fn broughton() -> Family {
        Family::parse("x1 + x1^2*x2 - t", 2).unwrap()
    }

    #[test]
    fn k0_examples() {
        let k = find_k0(&sphere(), (-2.0, 2.0), 10.0);
        assert_eq!(k.len(), 1);
        assert!(k[0].abs() < 1e-9);
        assert!(find_k0(&broughton(), (-2.0, 2.0), 10.0).is_empty());
        assert!(find_k0(&linear(), (-2.0, 2.0), 10.0).is_empty());
    }

    #[test]
    fn k0_of_two_critical_values() {
        // f = x^3 - 3x has critical values +-2
        let fam = Family::parse("x1^3 - 3*x1 + x2^2 - t", 2).unwrap();
        let k = find_k0(&fam, (-5.0, 5.0), 10.0);
        assert_eq!(k.len(), 2, "{k:?}");
        assert!((k[0] + 2.0).abs() < 1e-9 && (k[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn log_phi_gradient_matches_differences() {
        let fam = Family::parse("x1^2*x2 + 0.3*x2^3 - x1*t + t^2", 2).unwrap();
        let z = [0.7, -1.3, 0.4];
        let g = log_phi_gradient(&fam, &z);
        for k in 0..3 {
            let h = 1e-6;
            let mut a = z;
            let mut b = z;
            a[k] += h;
            b[k] -= h;
            let fd = (log_phi(&fam, &a) - log_phi(&fam, &b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn projection_respects_region() {
        let fam = broughton();
        let reg = Region::sphere(100.0, -0.1, 0.1);
        let z = project(&fam, &[0.5, -100.0, 0.0], &reg).unwrap();
        assert!((norm(&z[..2]) - 100.0).abs() < 1e-8);
        assert!(z[2].abs() <= 0.1);
        assert!(fam.residual(&z[..2], z[2]) < 1e-10);
    }

    #[test]
    fn linear_profile_grows_linearly() {
        let r = malgrange_profile(&linear(), 0.0, 0.1, &[10.0, 100.0, 1000.0], 20, 3).unwrap();
        for (m, rad) in r.mu0.iter().zip(&r.radii) {
            let m = m.unwrap();
            assert!((m - rad / 2f64.sqrt()).abs() < 1e-6 * rad, "{m} at {rad}");
        }
        assert!((r.fitted_slope.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(r.classification, AcvClass::MalgrangeHolds);
    }

    #[test]
    fn compact_pencil_is_vacuous() {
        let r = malgrange_profile(&sphere(), 1.0, 0.1, &[2.0, 5.0, 10.0], 10, 1).unwrap();
        assert!(r.mu0.iter().all(Option::is_none));
        assert_eq!(r.classification, AcvClass::VacuousCompact);
        let s = sphericalness_report(&sphere(), 1.0, 0.1, &[10.0, 100.0], 10, 1).unwrap();
        assert_eq!(s.verdict, Verdict::VacuousCompact);
        let cloud = limit_normal_cloud(&sphere(), 1.0, 0.1, 10.0, 50, 1, 0.1).unwrap();
        assert!(cloud.is_vacuous());
    }

    #[test]
    fn broughton_acv_at_zero() {
        let radii = [10.0, 30.0, 100.0, 300.0, 1000.0];
        let r = malgrange_profile(&broughton(), 0.0, 0.1, &radii, 50, 7).unwrap();
        for (m, rad) in r.mu0.iter().zip(&radii) {
            // along the explicit path the product is about 1/(4R)
            assert!(m.unwrap() <= 1.0 / rad, "{m:?} at {rad}");
        }
        assert!(r.fitted_slope.unwrap() <= -0.8, "{r:?}");
        assert_eq!(r.classification, AcvClass::AcvWithExponent);
    }

    #[test]
    fn broughton_malgrange_at_one() {
        let radii = [10.0, 30.0, 100.0, 300.0, 1000.0];
        let r = malgrange_profile(&broughton(), 1.0, 0.1, &radii, 50, 7).unwrap();
        assert_eq!(r.classification, AcvClass::MalgrangeHolds, "{r:?}");
    }

    #[test]
    fn sphericalness_examples() {
        let radii = [10.0, 100.0, 1000.0];
        let lin = sphericalness_report(&linear(), 0.0, 0.1, &radii, 20, 5).unwrap();
        assert_eq!(lin.verdict, Verdict::Spherical, "{lin:?}");
        assert!(lin.defect <= 0.1);
        let b0 = sphericalness_report(&broughton(), 0.0, 0.1, &radii, 30, 5).unwrap();
        assert!(b0.defect >= 0.9, "{b0:?}");
        assert_eq!(b0.verdict, Verdict::NotSpherical, "{b0:?}");
        let b1 = sphericalness_report(&broughton(), 1.0, 0.1, &radii, 30, 5).unwrap();
        assert_eq!(b1.verdict, Verdict::Spherical, "{b1:?}");
    }

    #[test]
    fn critical_value_is_rejected() {
        assert!(sphericalness_report(&sphere(), 0.0, 0.1, &[10.0], 5, 1).is_err());
    }

    #[test]
    fn linear_cloud_is_one_cell() {
        let fam = Family::parse("x1 - t", 3).unwrap();
        let h = 0.2;
        let cloud = limit_normal_cloud(&fam, 0.0, 0.1, 10.0, 200, 2, h).unwrap();
        assert!(cloud.pairs.len() >= 200);
        for p in &cloud.pairs {
            assert!((norm(&p.u) - 1.0).abs() < 1e-10 && (norm(&p.v) - 1.0).abs() < 1e-10);
        }
        let expected = 1.0 / sphere_cell_count(3, h) as f64;
        assert!((cloud.occupancy - expected).abs() < 1e-15);
        assert!(cloud.to_csv().starts_with("u1,u2,u3,v1,v2,v3,radius,tval\n"));
    }

    #[test]
    fn broughton_cloud_has_aligned_pairs() {
        let cloud = limit_normal_cloud(&broughton(), 0.0, 0.1, 10.0, 2000, 4, 0.05).unwrap();
        let near_axis = cloud
            .pairs
            .iter()
            .filter(|p| p.u[1] < -0.99)
            .map(|p| dot(&p.u, &p.v).abs())
            .fold(0.0, f64::max);
        assert!(near_axis > 0.9, "{near_axis}");
    }

    #[test]
    fn slab_and_level_directions_agree() {
        let h = 0.1;
        for (fam, c) in [(linear(), 0.0), (broughton(), 1.0)] {
            let slab = limit_normal_cloud(&fam, c, 0.1, 10.0, 400, 9, h).unwrap();
            let level = limit_normal_cloud(&fam, c, 0.0, 10.0, 400, 9, h).unwrap();
            let us = |cl: &NormalCloud| cl.pairs.iter().map(|p| p.u.clone()).collect::<Vec<_>>();
            assert!(directions_covered(&us(&slab), &us(&level), 2.0 * h));
            assert!(directions_covered(&us(&level), &us(&slab), 2.0 * h));
        }
    }

    #[test]
    fn cell_counts() {
        assert_eq!(sphere_cell_count(2, 0.1), 63);
        let c = sphere_cell(&[1.0, 0.0], 0.1);
        assert!(c[0] >= 0 && c[0] < 63);
        let total = sphere_cell_count(3, 0.3);
        assert!(total > 100 && total < 200, "{total}");
        assert_eq!(sphere_cell_count(4, 0.5), 8 * 64);
    }

    #[test]
    fn line_fit() {
        let (s, i, r2) = fit_line(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(fit_line(&[(1.0, 1.0)]).is_none());
        let mut pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        pts[4].1 = 100.0;
        assert!((theil_sen_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert!(theil_sen_slope(&[(1.0, 1.0), (1.0, 2.0)]).is_none());
    }
}
