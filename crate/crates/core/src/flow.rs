//! Trivializing flows on `M`.
//!
//! `chi = grad t_M / |grad t_M|^2` has `t`-component exactly one, so a
//! trajectory of `chi` reaches the level `t0 + s` at time `s`. Its `x`-part is
//! `-d_tF d_xF / |d_xF|^2`. The field `xi` has the same level clock but an
//! `x`-part tangent to the Euclidean spheres `|x| = const`.
//!
//! Both are integrated with an adaptive Dormand-Prince 5(4) pair in `x` with
//! `t = t0 + s`, followed by a Newton re-projection onto the level at fixed `t`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{surface_point_with_tol, Family, SurfacePoint};
use crate::poly::Point;
use crate::vecops::{dot, norm};

/// Transport aborts when `|grad t_M|` drops below this.
pub const NEAR_CRITICAL: f64 = 1e-8;
/// Residual bound on `|F|` at every recorded point.
pub const STEP_RESIDUAL: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-9;
/// Relative slack of [`gronwall_check`].
pub const GRONWALL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Chi,
    Xi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep {
    pub s: f64,
    pub point: Point,
    pub radius: f64,
    /// Value of `t_M` at the point.
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub start: SurfacePoint,
    pub steps: Vec<FlowStep>,
    pub field_kind: FieldKind,
}

impl FlowTrajectory {
    fn new(start: SurfacePoint, field_kind: FieldKind) -> Self {
        let p = start.p.clone();
        let step = FlowStep {
            s: 0.0,
            radius: p.radius(),
            level: p.t,
            point: p,
        };
        Self {
            start,
            steps: vec![step],
            field_kind,
        }
    }

    pub fn end(&self) -> &Point {
        &self.steps.last().expect("trajectory has its start").point
    }

    /// `max |level(s) - level(0) - s|` over the recorded steps.
    pub fn level_clock_error(&self) -> f64 {
        let l0 = self.steps[0].level;
        self.steps
            .iter()
            .map(|st| (st.level - l0 - st.s).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_residual(&self, fam: &Family) -> f64 {
        self.steps
            .iter()
            .map(|st| fam.value(&st.point.x, st.point.t).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `s,x1..xn,t,radius,level`.
    pub fn to_csv(&self) -> String {
        let n = self.start.p.x.len();
        let mut s = String::from("s");
        for i in 1..=n {
            let _ = write!(s, ",x{i}");
        }
        s.push_str(",t,radius,level\n");
        for st in &self.steps {
            let _ = write!(s, "{:?}", st.s);
            for v in &st.point.x {
                let _ = write!(s, ",{v:?}");
            }
            let _ = writeln!(s, ",{:?},{:?},{:?}", st.point.t, st.radius, st.level);
        }
        s
    }
}

/// A transport that stopped early, with everything recorded before the stop.
#[derive(Clone, Debug)]
pub struct FlowFailure {
    pub reason: Error,
    pub partial: FlowTrajectory,
}

impl std::fmt::Display for FlowFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} steps", self.reason, self.partial.steps.len())
    }
}

impl std::error::Error for FlowFailure {}

pub type FlowResult = std::result::Result<FlowTrajectory, FlowFailure>;

fn grad_tm_norm(fam: &Family, x: &[f64], t: f64) -> f64 {
    let g = fam.gradient(x, t);
    norm(&g[..x.len()]) / norm(&g)
}

fn chi_rate(fam: &Family, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let g = fam.gradient(x, t);
    let gt = norm(&g[..n]) / norm(&g);
    if !(gt >= NEAR_CRITICAL) {
        return Err(Error::NearCritical { norm: gt });
    }
    let a2 = dot(&g[..n], &g[..n]);
    Ok(g[..n].iter().map(|v| -g[n] * v / a2).collect())
}

/// Sphere-tangent part of `d_x F` at `x`.
fn tangential(a: &[f64], x: &[f64]) -> Vec<f64> {
    let r2 = dot(x, x);
    let c = if r2 > 0.0 { dot(a, x) / r2 } else { 0.0 };
    a.iter().zip(x).map(|(ai, xi)| ai - c * xi).collect()
}

fn xi_rate(fam: &Family, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let g = fam.gradient(x, t);
    let w = tangential(&g[..n], x);
    let g2 = dot(&g, &g);
    let comp = g[n].abs() * norm(&w) / g2;
    if !(comp > NEAR_CRITICAL) {
        return Err(Error::DegenerateSphericalComponent { norm: comp });
    }
    let w2 = dot(&w, &w);
    Ok(w.iter().map(|v| -g[n] * v / w2).collect())
}

/// Newton on the level `t` along `d_x F` (chi) or its sphere-tangent part (xi).
fn reproject(fam: &Family, x0: &[f64], t: f64, kind: FieldKind, radius: f64) -> Option<Vec<f64>> {
    let mut x = x0.to_vec();
    for _ in 0..50 {
        let f = fam.value(&x, t);
        if f.abs() <= 1e-13 * fam.scale(&x, t) {
            break;
        }
        let a = fam.x_gradient(&x, t);
        let d = match kind {
            FieldKind::Chi => a,
            FieldKind::Xi => tangential(&a, &x),
        };
        let dd = dot(&d, &d);
        if !(dd > 0.0) {
            return None;
        }
        let mut next: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi - f / dd * di).collect();
        if kind == FieldKind::Xi {
            let r = norm(&next);
            next.iter_mut().for_each(|v| *v *= radius / r);
        }
        if !(fam.value(&next, t).abs() < f.abs()) {
            break;
        }
        x = next;
    }
    (fam.value(&x, t).abs() <= STEP_RESIDUAL && fam.residual(&x, t) <= 1e-10).then_some(x)
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One trial step of size `h` (signed). `None` when a stage hits a bad region.
fn dp_step<R>(rate: &R, x: &[f64], t: f64, h: f64) -> Option<(Vec<f64>, f64)>
where
    R: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    for i in 0..7 {
        let xi: Vec<f64> = (0..n)
            .map(|m| x[m] + h * (0..i).map(|j| A[i][j] * k[j][m]).sum::<f64>())
            .collect();
        k.push(rate(&xi, t + C[i] * h).ok()?);
    }
    let mut xnew = x.to_vec();
    let mut err = 0.0f64;
    for m in 0..n {
        let hi: f64 = (0..7).map(|i| B5[i] * k[i][m]).sum();
        let lo: f64 = (0..7).map(|i| B4[i] * k[i][m]).sum();
        xnew[m] += h * hi;
        err = err.max((h * (hi - lo)).abs());
    }
    let scale = 1.0 + norm(x).max(norm(&xnew));
    Some((xnew, err / scale))
}

fn integrate<R>(fam: &Family, start: &SurfacePoint, s_target: f64, tol: f64, kind: FieldKind, rate: R) -> FlowResult
where
    R: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let mut traj = FlowTrajectory::new(start.clone(), kind);
    let fail = |reason, partial| Err(FlowFailure { reason, partial });
    if !(tol > 0.0) || !s_target.is_finite() {
        return fail(Error::InvalidArgument("tol must be positive and s finite".into()), traj);
    }
    let t0 = start.p.t;
    let r0 = start.p.radius();
    let dir = if s_target < 0.0 { -1.0 } else { 1.0 };
    let total = s_target.abs();
    let mut x = start.p.x.clone();
    let mut s = 0.0f64;
    let mut h = (0.01 * total).max(f64::MIN_POSITIVE);
    if let Err(e) = rate(&x, t0) {
        return fail(e, traj);
    }
    while s < total {
        let remaining = total - s;
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        if step < 1e-15 * total.max(s) {
            return fail(Error::StepUnderflow { s: dir * s }, traj);
        }
        let t = t0 + dir * s;
        let Some((xnew, err)) = dp_step(&rate, &x, t, dir * step) else {
            h = 0.25 * step;
            continue;
        };
        let ratio = err / tol;
        if ratio > 1.0 {
            h = step * (0.9 * ratio.powf(-0.2)).max(0.2);
            continue;
        }
        let s_new = if last { total } else { s + step };
        let t_new = t0 + dir * s_new;
        let Some(xp) = reproject(fam, &xnew, t_new, kind, r0) else {
            h = 0.5 * step;
            continue;
        };
        x = xp;
        s = s_new;
        traj.steps.push(FlowStep {
            s: dir * s,
            radius: norm(&x),
            level: t_new,
            point: Point::new(x.clone(), t_new),
        });
        if let Err(e) = rate(&x, t_new) {
            return fail(e, traj);
        }
        let grow = if ratio > 0.0 { (0.9 * ratio.powf(-0.2)).min(5.0) } else { 5.0 };
        h = step * grow;
    }
    Ok(traj)
}

fn check_start(fam: &Family, start: &SurfacePoint, kind: FieldKind) -> std::result::Result<(), FlowFailure> {
    let partial = || FlowTrajectory::new(start.clone(), kind);
    if let Err(reason) = surface_point_with_tol(fam, &start.p, 1e-8) {
        return Err(FlowFailure { reason, partial: partial() });
    }
    let gt = grad_tm_norm(fam, &start.p.x, start.p.t);
    if start.critical || !(gt >= NEAR_CRITICAL) {
        return Err(FlowFailure {
            reason: Error::NearCritical { norm: gt },
            partial: partial(),
        });
    }
    Ok(())
}

/// Integrates `chi` from `start` for time `s_target`, landing on the level
/// `t0 + s_target`.
pub fn transport(fam: &Family, start: &SurfacePoint, s_target: f64, tol: f64) -> FlowResult {
    check_start(fam, start, FieldKind::Chi)?;
    integrate(fam, start, s_target, tol, FieldKind::Chi, |x, t| chi_rate(fam, x, t))
}

/// Integrates the sphere-tangent field `xi`: `|x|` stays constant and the
/// level advances at unit speed.
pub fn xi_transport(fam: &Family, start: &SurfacePoint, s_target: f64, tol: f64) -> FlowResult {
    check_start(fam, start, FieldKind::Xi)?;
    integrate(fam, start, s_target, tol, FieldKind::Xi, |x, t| xi_rate(fam, x, t))
}

/// `radius(s) <= radius(0) exp(|s| / a)` at every recorded step.
pub fn gronwall_check(traj: &FlowTrajectory, a: f64) -> bool {
    let Some(first) = traj.steps.first() else {
        return true;
    };
    if !(a > 0.0) {
        return false;
    }
    traj.steps
        .iter()
        .all(|st| st.radius <= first.radius * (st.s.abs() / a).exp() * (1.0 + GRONWALL_TOL))
}

/// Smallest `|x| |grad t_M|` over the recorded steps.
pub fn measured_a(fam: &Family, traj: &FlowTrajectory) -> f64 {
    traj.steps
        .iter()
        .map(|st| st.radius * grad_tm_norm(fam, &st.point.x, st.point.t))
        .fold(f64::INFINITY, f64::min)
}

/// Convenience: the [`SurfacePoint`] at `(x, t)`.
pub fn start_at(fam: &Family, x: Vec<f64>, t: f64) -> Result<SurfacePoint> {
    surface_point_with_tol(fam, &Point::new(x, t), 1e-8)
}
