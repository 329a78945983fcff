//! Total curvature `K(t) = int_{T_t} kappa` and total absolute curvature
//! `|K|(t) = int_{T_t} |kappa|`, profiles over a parameter grid, the Gauss-map
//! degree cross-check, and jump detection along a profile.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::asym::find_k0;
use crate::error::{Error, Result};
use crate::geom::{surface_point, Family};
use crate::rng;
use crate::sample::{thin_shell_samples, trace_level_curve, Polyline};

/// Relative shell half-width of the thin-shell estimator, `delta = 1e-3 R`.
pub const SHELL_WIDTH_FACTOR: f64 = 1e-3;
pub const DEFAULT_K_SIGMA: f64 = 5.0;
/// Bisection rounds used to confirm a jump.
pub const REFINE_ROUNDS: u32 = 3;
/// A confirmed jump keeps at least this fraction of its gap after refinement.
pub const PERSIST_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exterior angles of traced level curves (`n = 2`).
    Tracer,
    /// Co-area Monte-Carlo over a thin shell (any `n`).
    ThinShell,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracer" => Ok(Self::Tracer),
            "thin_shell" => Ok(Self::ThinShell),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// Shared settings of the curvature estimators.
#[derive(Clone, Copy, Debug)]
pub struct CurvatureConfig {
    pub method: Method,
    /// Tracer: grid cells per box side. Thin shell: accepted draws.
    pub budget: usize,
    pub ball_radius: f64,
    pub seed: u64,
}

/// One curvature estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Estimate {
    pub k: f64,
    pub abs_k: f64,
    pub err: f64,
    pub empty: bool,
    /// Per-component `(K, |K|)`, tracer only, sorted by component centroid.
    pub components: Vec<(f64, f64)>,
}

impl Estimate {
    fn empty() -> Self {
        Self {
            empty: true,
            ..Self::default()
        }
    }
}

/// Total and total absolute curvature of `T_c ∩ B_R`.
pub fn total_curvature_at(fam: &Family, c: f64, cfg: &CurvatureConfig) -> Result<Estimate> {
    match cfg.method {
        Method::Tracer => {
            let cell = 2.0 * cfg.ball_radius / cfg.budget.max(1) as f64;
            let pls = trace_level_curve(fam, c, cfg.ball_radius, cell)?;
            Ok(tracer_estimate(&pls))
        }
        Method::ThinShell => {
            let delta = SHELL_WIDTH_FACTOR * cfg.ball_radius;
            match thin_shell_samples(fam, c, cfg.ball_radius, delta, cfg.budget, cfg.seed) {
                Ok(batch) => {
                    let (k, ek) = batch.integrate(|sp| sp.kappa.unwrap_or(0.0));
                    let (abs_k, ea) = batch.integrate(|sp| sp.kappa.unwrap_or(0.0).abs());
                    Ok(Estimate {
                        k,
                        abs_k,
                        err: ek.max(ea),
                        empty: false,
                        components: Vec::new(),
                    })
                }
                Err(Error::EmptyLevelInBall) => Ok(Estimate::empty()),
                Err(e) => Err(e),
            }
        }
    }
}

/// Turning of traced polylines. The error bar compares against the polyline
/// that keeps every second vertex, with a floor so it is never zero.
pub fn tracer_estimate(pls: &[Polyline]) -> Estimate {
    if pls.is_empty() {
        return Estimate::empty();
    }
    let mut comps: Vec<((f64, f64), (f64, f64))> = Vec::new();
    let (mut k, mut abs_k, mut err) = (0.0, 0.0, 0.0);
    for pl in pls {
        let (ck, ca) = pl.turning();
        let (qk, qa) = pl.coarse_turning();
        k += ck;
        abs_k += ca;
        err += (ck - qk).abs().max((ca - qa).abs());
        let m = pl.len().max(1) as f64;
        let cx = pl.vertices.iter().map(|v| v.x[0]).sum::<f64>() / m;
        let cy = pl.vertices.iter().map(|v| v.x[1]).sum::<f64>() / m;
        comps.push(((cx, cy), (ck, ca)));
    }
    comps.sort_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.total_cmp(&b.0 .1)));
    Estimate {
        k,
        abs_k,
        err: err + 1e-12 * (1.0 + abs_k),
        empty: false,
        components: comps.into_iter().map(|(_, v)| v).collect(),
    }
}

/// Markers attached to one grid point of a profile.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PointFlags {
    pub near_k0: bool,
    pub empty: bool,
    pub discontinuity_left: bool,
    pub discontinuity_right: bool,
    pub error: Option<String>,
}

impl PointFlags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.near_k0 {
            parts.push("near_K0");
        }
        if self.empty {
            parts.push("empty");
        }
        if self.discontinuity_left {
            parts.push("discontinuity_left");
        }
        if self.discontinuity_right {
            parts.push("discontinuity_right");
        }
        if self.error.is_some() {
            parts.push("error");
        }
        if parts.is_empty() {
            "ok".to_string()
        } else {
            parts.join("|")
        }
    }

    pub fn has_discontinuity(&self) -> bool {
        self.discontinuity_left || self.discontinuity_right
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvatureProfile {
    pub tgrid: Vec<f64>,
    pub k: Vec<f64>,
    pub abs_k: Vec<f64>,
    pub err: Vec<f64>,
    pub flags: Vec<PointFlags>,
    pub components: Vec<Vec<(f64, f64)>>,
    /// Critical values of `t_M` found inside the grid range.
    pub k0: Vec<f64>,
}

impl CurvatureProfile {
    pub fn len(&self) -> usize {
        self.tgrid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgrid.is_empty()
    }

    /// CSV with columns `t,K,absK,err,flag`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,K,absK,err,flag\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{:?},{:?},{:?},{:?},{}",
                self.tgrid[i],
                self.k[i],
                self.abs_k[i],
                self.err[i],
                self.flags[i].label()
            );
        }
        s
    }

    /// Marks the endpoints of every flagged interval.
    pub fn mark_discontinuities(&mut self, intervals: &[(f64, f64)]) {
        for &(lo, hi) in intervals {
            for (i, &t) in self.tgrid.iter().enumerate() {
                if t == lo {
                    self.flags[i].discontinuity_right = true;
                }
                if t == hi {
                    self.flags[i].discontinuity_left = true;
                }
            }
        }
    }

    /// `|K|` profile of the `j`-th component (tracer), when every grid point
    /// has the same number of components.
    pub fn component_profile(&self, j: usize) -> Option<CurvatureProfile> {
        let m = self.components.first()?.len();
        if j >= m || self.components.iter().any(|c| c.len() != m) {
            return None;
        }
        let mut p = self.clone();
        p.k = self.components.iter().map(|c| c[j].0).collect();
        p.abs_k = self.components.iter().map(|c| c[j].1).collect();
        p.components = Vec::new();
        Some(p)
    }
}

/// Evenly spaced grid with `steps` points on `[tmin, tmax]`.
pub fn linspace(tmin: f64, tmax: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![tmin];
    }
    let h = (tmax - tmin) / (steps - 1) as f64;
    (0..steps)
        .map(|i| if i + 1 == steps { tmax } else { tmin + i as f64 * h })
        .collect()
}

/// Curvature profile on `steps` evenly spaced values of `[tmin, tmax]`.
///
/// Grid point `i` uses the random stream derived from `(seed, i)`. Critical
/// values of `t_M` inside the range mark the grid points within one step.
pub fn profile(fam: &Family, tmin: f64, tmax: f64, steps: usize, cfg: &CurvatureConfig) -> Result<CurvatureProfile> {
    if steps < 2 || !(tmax > tmin) {
        return Err(Error::InvalidArgument("profile needs steps >= 2 and tmin < tmax".into()));
    }
    let tgrid = linspace(tmin, tmax, steps);
    let h = (tmax - tmin) / (steps - 1) as f64;
    let k0 = find_k0(fam, (tmin, tmax), cfg.ball_radius.min(crate::asym::K0_BOX_CAP));
    let results: Vec<Result<Estimate>> = tgrid
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let c = CurvatureConfig {
                seed: rng::derive_seed(cfg.seed, i as u64),
                ..*cfg
            };
            total_curvature_at(fam, t, &c)
        })
        .collect();
    let mut out = CurvatureProfile {
        tgrid: tgrid.clone(),
        k: Vec::with_capacity(steps),
        abs_k: Vec::with_capacity(steps),
        err: Vec::with_capacity(steps),
        flags: Vec::with_capacity(steps),
        components: Vec::with_capacity(steps),
        k0: k0.clone(),
    };
    for (i, r) in results.into_iter().enumerate() {
        let mut flags = PointFlags {
            near_k0: k0.iter().any(|&v| (tgrid[i] - v).abs() <= h * (1.0 + 1e-9)),
            ..PointFlags::default()
        };
        match r {
            Ok(e) => {
                flags.empty = e.empty;
                out.k.push(e.k);
                out.abs_k.push(e.abs_k);
                out.err.push(e.err);
                out.components.push(e.components);
            }
            Err(e) => {
                flags.error = Some(e.to_string());
                out.k.push(f64::NAN);
                out.abs_k.push(f64::NAN);
                out.err.push(f64::NAN);
                out.components.push(Vec::new());
            }
        }
        out.flags.push(flags);
    }
    Ok(out)
}

/// Re-evaluates the profile quantity at `t` with the budget multiplied by the
/// second argument.
pub type Reevaluate<'a> = dyn Fn(f64, usize) -> Estimate + Sync + 'a;

/// Builds the re-evaluation hook for a family and configuration. Off-grid
/// points draw their stream from the bit pattern of `t`.
pub fn reevaluator<'a>(fam: &'a Family, cfg: CurvatureConfig) -> impl Fn(f64, usize) -> Estimate + Sync + 'a {
    move |t: f64, mult: usize| {
        let c = CurvatureConfig {
            budget: cfg.budget * mult,
            seed: rng::derive_seed(cfg.seed ^ 0x5EED_D0B1, t.to_bits()),
            ..cfg
        };
        total_curvature_at(fam, t, &c).unwrap_or_else(|_| Estimate {
            k: f64::NAN,
            abs_k: f64::NAN,
            err: f64::INFINITY,
            ..Estimate::default()
        })
    }
}

/// Grid intervals where `|K|` jumps.
///
/// An interval is a candidate when the gap between its endpoint values
/// exceeds `k_sigma` times the sum of their error bars. Candidates are
/// re-evaluated at doubled budget and must still pass the same test; the
/// interval is then bisected [`REFINE_ROUNDS`] times, following the half with
/// the larger gap (stopping early once a midpoint is too noisy to resolve
/// the jump), and the final gap must retain [`PERSIST_RATIO`] of the
/// confirmed one (a continuous profile loses it at the bisection rate).
/// Intervals touching a `near_K0` or failed point are skipped, and adjacent
/// flagged intervals are merged.
pub fn detect_discontinuities(profile: &CurvatureProfile, k_sigma: f64, rerun: &Reevaluate<'_>) -> Vec<(f64, f64)> {
    let m = profile.len();
    if m < 2 {
        return Vec::new();
    }
    let flagged: Vec<bool> = (0..m - 1)
        .into_par_iter()
        .map(|i| {
            let (fa, fb) = (&profile.flags[i], &profile.flags[i + 1]);
            if fa.near_k0 || fb.near_k0 || fa.error.is_some() || fb.error.is_some() {
                return false;
            }
            let gap = (profile.abs_k[i + 1] - profile.abs_k[i]).abs();
            if !(gap > k_sigma * (profile.err[i] + profile.err[i + 1])) {
                return false;
            }
            confirm_jump(profile.tgrid[i], profile.tgrid[i + 1], k_sigma, rerun)
        })
        .collect();
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < m - 1 {
        if flagged[i] {
            let lo = profile.tgrid[i];
            let mut j = i;
            while j + 1 < m - 1 && flagged[j + 1] {
                j += 1;
            }
            out.push((lo, profile.tgrid[j + 1]));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn confirm_jump(ta: f64, tb: f64, k_sigma: f64, rerun: &Reevaluate<'_>) -> bool {
    let mut lo = (ta, rerun(ta, 2));
    let mut hi = (tb, rerun(tb, 2));
    let gap = |a: &Estimate, b: &Estimate| (b.abs_k - a.abs_k).abs();
    let passes = |a: &Estimate, b: &Estimate| gap(a, b) > k_sigma * (a.err + b.err);
    if !passes(&lo.1, &hi.1) {
        return false;
    }
    let confirmed = gap(&lo.1, &hi.1);
    for _ in 0..REFINE_ROUNDS {
        let tm = 0.5 * (lo.0 + hi.0);
        let mid = (tm, rerun(tm, 2));
        if !mid.1.abs_k.is_finite() || k_sigma * mid.1.err >= PERSIST_RATIO * confirmed {
            break;
        }
        if gap(&lo.1, &mid.1) >= gap(&mid.1, &hi.1) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    passes(&lo.1, &hi.1) && gap(&lo.1, &hi.1) >= PERSIST_RATIO * confirmed
}

/// Doubles the ball radius from `r0` until `|K|` changes by less than 1%.
/// Returns the chosen radius and the whole sweep `(R, |K|)`.
pub fn choose_ball_radius(
    fam: &Family,
    c: f64,
    cfg: &CurvatureConfig,
    r0: f64,
    max_doublings: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut sweep = Vec::new();
    let mut r = r0;
    let mut prev: Option<f64> = None;
    for _ in 0..=max_doublings {
        // keep the tracer cell fixed while the box grows
        let budget = match cfg.method {
            Method::Tracer => ((cfg.budget as f64) * r / r0).round() as usize,
            Method::ThinShell => cfg.budget,
        };
        let e = total_curvature_at(
            fam,
            c,
            &CurvatureConfig {
                ball_radius: r,
                budget,
                ..*cfg
            },
        )?;
        sweep.push((r, e.abs_k));
        if let Some(p) = prev {
            if (e.abs_k - p).abs() <= 0.01 * p.abs().max(1e-12) {
                return Ok((r, sweep));
            }
        }
        prev = Some(e.abs_k);
        r *= 2.0;
    }
    Ok((r / 2.0, sweep))
}

/// Change-of-variables cross-check for plane families: counts the preimages of
/// stratified random directions `u` under the Gauss map of the traced level,
/// with orientation signs. Returns `(2 pi avg signed count, 2 pi avg count)`.
pub fn degree_crosscheck(
    fam: &Family,
    c: f64,
    box_radius: f64,
    cell: f64,
    directions: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if fam.n() != 2 {
        return Err(Error::UnsupportedDimension {
            expected: "{2}",
            got: fam.n(),
        });
    }
    if directions == 0 {
        return Err(Error::InvalidArgument("directions must be positive".into()));
    }
    let pls = trace_level_curve(fam, c, box_radius, cell)?;
    let mut rng = rng::stream(seed, rng::domain::DEGREE, 0, 0);
    let dirs: Vec<f64> = (0..directions)
        .map(|k| 2.0 * PI * (k as f64 + rng.random::<f64>()) / directions as f64)
        .collect();
    let mut signed: i64 = 0;
    let mut unsigned: u64 = 0;
    for pl in &pls {
        let angles: Vec<f64> = pl
            .vertices
            .iter()
            .map(|v| {
                let sp = surface_point(fam, v)?;
                let n = sp.normal.ok_or(Error::CriticalPoint)?;
                Ok(n[1].atan2(n[0]))
            })
            .collect::<Result<_>>()?;
        let m = angles.len();
        let segs = if pl.closed { m } else { m.saturating_sub(1) };
        for i in 0..segs {
            let a = angles[i];
            let b = angles[(i + 1) % m];
            let d = wrap_angle(b - a);
            let hits = count_in_arc(&dirs, a, d);
            unsigned += hits;
            signed += if d > 0.0 { hits as i64 } else { -(hits as i64) };
        }
    }
    let scale = 2.0 * PI / directions as f64;
    Ok((scale * signed as f64, scale * unsigned as f64))
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Number of sorted directions in `[0, 2 pi)` inside the arc swept from `a` by
/// `d` (half-open at the start so shared vertices are counted once).
fn count_in_arc(dirs: &[f64], a: f64, d: f64) -> u64 {
    let (lo, len) = if d >= 0.0 { (a, d) } else { (a + d, -d) };
    let lo = lo.rem_euclid(2.0 * PI);
    let hi = lo + len;
    let count = |from: f64, to: f64| {
        // directions in (from, to]
        let i = dirs.partition_point(|&v| v <= from);
        let j = dirs.partition_point(|&v| v <= to);
        (j - i) as u64
    };
    if hi < 2.0 * PI {
        count(lo, hi)
    } else {
        count(lo, 2.0 * PI) + count(-1.0, hi - 2.0 * PI)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere2() -> Family {
        Family::parse("x1^2 + x2^2 - t", 2).unwrap()
    }

    fn tracer(budget: usize, r: f64) -> CurvatureConfig {
        CurvatureConfig {
            method: Method::Tracer,
            budget,
            ball_radius: r,
            seed: 1,
        }
    }

    #[test]
    fn circle_total_turning() {
        let e = total_curvature_at(&sphere2(), 4.0, &tracer(160, 4.0)).unwrap();
        assert!((e.k - 2.0 * PI).abs() < 1e-3 && (e.abs_k - 2.0 * PI).abs() < 1e-3);
        assert!(e.err > 0.0 && !e.empty);
    }

    #[test]
    fn linear_family_is_flat() {
        let fam = Family::parse("x1 - t", 2).unwrap();
        for c in [-1.0, 0.0, 2.5] {
            let e = total_curvature_at(&fam, c, &tracer(100, 5.0)).unwrap();
            assert!(e.k.abs() < 1e-9 && e.abs_k < 1e-9, "{e:?}");
        }
    }

    #[test]
    fn empty_level_is_flagged() {
        let e = total_curvature_at(&sphere2(), -1.0, &tracer(100, 2.0)).unwrap();
        assert!(e.empty && e.abs_k == 0.0);
        let shell = CurvatureConfig {
            method: Method::ThinShell,
            ..tracer(200, 2.0)
        };
        assert!(total_curvature_at(&sphere2(), -1.0, &shell).unwrap().empty);
    }

    #[test]
    fn sphere_profile_over_critical_value() {
        let p = profile(&sphere2(), -1.0, 1.0, 41, &tracer(200, 2.0)).unwrap();
        assert_eq!(p.k0.len(), 1);
        assert!(p.k0[0].abs() < 1e-9);
        for (i, &t) in p.tgrid.iter().enumerate() {
            if t < -1e-12 {
                assert!(p.flags[i].empty, "t = {t}");
            }
            assert_eq!(p.flags[i].near_k0, t.abs() <= 0.05 + 1e-9, "t = {t}");
        }
    }

    #[test]
    fn synthetic_step_is_flagged_once() {
        let tgrid = linspace(0.0, 1.0, 11);
        let step = |t: f64| if t < 0.43 { 1.0 } else { 11.0 };
        let prof = CurvatureProfile {
            abs_k: tgrid.iter().map(|&t| step(t)).collect(),
            k: tgrid.iter().map(|&t| step(t)).collect(),
            err: vec![0.1; 11],
            flags: vec![PointFlags::default(); 11],
            components: vec![Vec::new(); 11],
            k0: Vec::new(),
            tgrid,
        };
        let rerun = |t: f64, _m: usize| Estimate {
            k: step(t),
            abs_k: step(t),
            err: 0.07,
            ..Estimate::default()
        };
        let flags = detect_discontinuities(&prof, 5.0, &rerun);
        assert_eq!(flags.len(), 1);
        assert!(flags[0].0 < 0.43 && flags[0].1 > 0.43);
    }

    #[test]
    fn noisy_constant_is_not_flagged() {
        let tgrid = linspace(0.0, 1.0, 30);
        let mut rng = rng::stream(3, 99, 0, 0);
        let noise: Vec<f64> = (0..30).map(|_| 0.01 * (rng.random::<f64>() - 0.5)).collect();
        let prof = CurvatureProfile {
            abs_k: noise.iter().map(|e| 2.0 * PI + e).collect(),
            k: noise.iter().map(|e| 2.0 * PI + e).collect(),
            err: vec![0.01; 30],
            flags: vec![PointFlags::default(); 30],
            components: vec![Vec::new(); 30],
            k0: Vec::new(),
            tgrid,
        };
        let rerun = |_t: f64, _m: usize| Estimate {
            abs_k: 2.0 * PI,
            err: 0.007,
            ..Estimate::default()
        };
        assert!(detect_discontinuities(&prof, 5.0, &rerun).is_empty());
    }

    #[test]
    fn steep_continuous_profile_is_not_flagged() {
        // error bars far below the variation: only the refinement step can
        // tell this apart from a jump
        let f = |t: f64| 10.0 * (t * 8.0).tanh();
        let tgrid = linspace(-1.0, 1.0, 21);
        let prof = CurvatureProfile {
            abs_k: tgrid.iter().map(|&t| f(t)).collect(),
            k: tgrid.iter().map(|&t| f(t)).collect(),
            err: vec![1e-6; 21],
            flags: vec![PointFlags::default(); 21],
            components: vec![Vec::new(); 21],
            k0: Vec::new(),
            tgrid,
        };
        let rerun = |t: f64, _m: usize| Estimate {
            abs_k: f(t),
            err: 1e-6,
            ..Estimate::default()
        };
        assert!(detect_discontinuities(&prof, 5.0, &rerun).is_empty());
    }

    #[test]
    fn degree_of_circle_and_line() {
        let (k, a) = degree_crosscheck(&sphere2(), 1.0, 2.0, 0.05, 720, 4).unwrap();
        assert!((k - 2.0 * PI).abs() < 1e-12 && (a - 2.0 * PI).abs() < 1e-12, "{k} {a}");
        let lin = Family::parse("x1 - t", 2).unwrap();
        let (k, a) = degree_crosscheck(&lin, 0.5, 5.0, 0.1, 720, 4).unwrap();
        assert_eq!((k, a), (0.0, 0.0));
    }

    #[test]
    fn csv_has_declared_columns() {
        let p = profile(&sphere2(), 0.5, 1.0, 3, &tracer(100, 2.0)).unwrap();
        let csv = p.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,K,absK,err,flag"));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn count_in_arc_wraps() {
        let dirs = vec![0.1, 1.0, 3.0, 6.2];
        assert_eq!(count_in_arc(&dirs, 6.0, 0.5), 2);
        assert_eq!(count_in_arc(&dirs, 1.0, -0.95), 2);
        assert_eq!(count_in_arc(&dirs, 0.1, 0.8), 0);
    }
}
