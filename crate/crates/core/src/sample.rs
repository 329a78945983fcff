//! Measure-weighted samples of the levels `T_c = {x : F(x, c) = 0}`.
//!
//! Two samplers: a curve tracer for `n = 2` (grid seeding followed by
//! predictor-corrector continuation of every component) and a thin-shell
//! Monte-Carlo sampler for any `n` based on the co-area formula.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{surface_point, Family, SurfacePoint};
use crate::poly::Point;
use crate::rng;
use crate::vecops::{dot, norm};

pub const NEWTON_MAX_ITERS: usize = 50;
pub const NEWTON_TOL: f64 = 1e-9;
/// Samples with `|d_x F|` below this are discarded by the thin-shell sampler.
pub const SHELL_MIN_GRADIENT: f64 = 1e-10;
/// Draws per work item of the thin-shell sampler.
pub const SHELL_CHUNK: u64 = 1 << 14;
/// Chunks evaluated per round; fixed so the set of chunks used never depends
/// on the size of the thread pool.
const SHELL_ROUND: u64 = 16;

/// Projects `x0` onto `T_c` by damped Newton steps along `d_x F`.
pub fn newton_project(fam: &Family, x0: &[f64], c: f64) -> Result<Point> {
    newton_project_tol(fam, x0, c, NEWTON_TOL)
}

pub fn newton_project_tol(fam: &Family, x0: &[f64], c: f64, tol: f64) -> Result<Point> {
    let n = fam.n();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let mut x = x0.to_vec();
    let mut g = fam.value(&x, c);
    for _ in 0..NEWTON_MAX_ITERS {
        if g.abs() <= tol * fam.scale(&x, c) {
            return Ok(Point::new(x, c));
        }
        let dg = fam.x_gradient(&x, c);
        let d2 = dot(&dg, &dg);
        if !(d2 > 1e-300) || !d2.is_finite() {
            return Err(Error::NoConvergence);
        }
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = x
                .iter()
                .zip(&dg)
                .map(|(xi, di)| xi - lambda * g / d2 * di)
                .collect();
            let gt = fam.value(&trial, c);
            if gt.abs() < g.abs() || lambda < 1e-3 {
                x = trial;
                g = gt;
                break;
            }
            lambda *= 0.5;
        }
        if !g.is_finite() {
            return Err(Error::NoConvergence);
        }
    }
    if g.abs() <= tol * fam.scale(&x, c) {
        Ok(Point::new(x, c))
    } else {
        Err(Error::NoConvergence)
    }
}

/// Ordered vertices of one traced component of a plane level curve.
///
/// Vertices follow the orientation `J N` (`J` the rotation by +90 degrees), so
/// left turns are positive curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub vertices: Vec<Point>,
    pub closed: bool,
}

impl Polyline {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Euclidean length, including the closing segment of a closed polyline.
    pub fn length(&self) -> f64 {
        let v = &self.vertices;
        let mut l: f64 = v.windows(2).map(|w| dist(&w[0].x, &w[1].x)).sum();
        if self.closed && v.len() > 1 {
            l += dist(&v[v.len() - 1].x, &v[0].x);
        }
        l
    }

    /// Signed exterior angles at every vertex where two segments meet.
    pub fn exterior_angles(&self) -> Vec<f64> {
        exterior_angles_of(self.vertices.iter().map(|p| [p.x[0], p.x[1]]), self.closed)
    }

    /// `(sum of signed exterior angles, sum of absolute exterior angles)`.
    pub fn turning(&self) -> (f64, f64) {
        let a = self.exterior_angles();
        (a.iter().sum(), a.iter().map(|v| v.abs()).sum())
    }

    /// Turning of the polyline that keeps every second vertex; compared with
    /// [`Polyline::turning`] it estimates the discretization error.
    pub fn coarse_turning(&self) -> (f64, f64) {
        let v = &self.vertices;
        let mut pts: Vec<[f64; 2]> = v.iter().step_by(2).map(|p| [p.x[0], p.x[1]]).collect();
        if !self.closed && v.len() % 2 == 0 {
            if let Some(last) = v.last() {
                pts.push([last.x[0], last.x[1]]);
            }
        }
        let a = exterior_angles_of(pts.into_iter(), self.closed);
        (a.iter().sum(), a.iter().map(|v| v.abs()).sum())
    }
}

fn exterior_angles_of(pts: impl Iterator<Item = [f64; 2]>, closed: bool) -> Vec<f64> {
    let pts: Vec<[f64; 2]> = pts.collect();
    let m = pts.len();
    if m < 3 {
        return Vec::new();
    }
    let seg = |i: usize, j: usize| [pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]];
    let angle = |a: [f64; 2], b: [f64; 2]| {
        let cross = a[0] * b[1] - a[1] * b[0];
        let d = a[0] * b[0] + a[1] * b[1];
        cross.atan2(d)
    };
    let mut out = Vec::with_capacity(m);
    if closed {
        for i in 0..m {
            let prev = (i + m - 1) % m;
            let next = (i + 1) % m;
            out.push(angle(seg(prev, i), seg(i, next)));
        }
    } else {
        for i in 1..m - 1 {
            out.push(angle(seg(i - 1, i), seg(i, i + 1)));
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Continuation controls of the curve tracer.
#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    /// Largest step, as a fraction of the seeding cell.
    pub max_step_factor: f64,
    /// Largest tangent rotation accepted per step, radians.
    pub max_turn: f64,
    /// Steps below `min_step_factor * cell` end the component.
    pub min_step_factor: f64,
    pub max_vertices: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            max_step_factor: 0.5,
            max_turn: 0.05,
            min_step_factor: 1e-9,
            max_vertices: 2_000_000,
        }
    }
}

/// Traces `T_c` inside the box `[-R, R]^2`.
///
/// Sign changes of `F(., c)` along the edges of a grid with spacing `cell`
/// give seeds (linear interpolation, then Newton). Every seed that is not
/// already on a traced component starts a predictor-corrector continuation
/// in both directions, which stops on leaving the box (the last vertex is
/// placed on the boundary) or on returning to the seed (closed component).
pub fn trace_level_curve(fam: &Family, c: f64, box_radius: f64, cell: f64) -> Result<Vec<Polyline>> {
    trace_level_curve_with(fam, c, box_radius, cell, &TraceOptions::default())
}

pub fn trace_level_curve_with(
    fam: &Family,
    c: f64,
    box_radius: f64,
    cell: f64,
    opts: &TraceOptions,
) -> Result<Vec<Polyline>> {
    if fam.n() != 2 {
        return Err(Error::UnsupportedDimension {
            expected: "{2}",
            got: fam.n(),
        });
    }
    if !(cell > 0.0) || !(box_radius > 0.0) {
        return Err(Error::InvalidArgument("cell and box radius must be positive".into()));
    }
    let seeds = grid_seeds(fam, c, box_radius, cell);
    let tracer = Tracer {
        fam,
        c,
        r: box_radius,
        cell,
        opts: *opts,
    };
    let mut index = CoverIndex::new(cell);
    let mut out = Vec::new();
    for seed in seeds {
        if index.covers(&seed, 0.05 * cell) {
            continue;
        }
        if let Some(pl) = tracer.trace_from(&seed) {
            index.insert(out.len(), &pl);
            out.push(pl);
        }
    }
    Ok(out)
}

fn grid_seeds(fam: &Family, c: f64, r: f64, cell: f64) -> Vec<[f64; 2]> {
    let m = (2.0 * r / cell).ceil().max(1.0) as usize;
    let h = 2.0 * r / m as f64;
    // A small irrational offset keeps grid nodes off symmetry lines of the input.
    let shift = h * 0.061_803_398_875;
    let coord = |i: usize| -r + shift + i as f64 * h;
    let vals: Vec<Vec<f64>> = (0..=m)
        .map(|i| {
            let x = coord(i);
            (0..=m).map(|j| fam.value(&[x, coord(j)], c)).collect()
        })
        .collect();
    let mut seeds = Vec::new();
    let mut push = |a: [f64; 2], b: [f64; 2], fa: f64, fb: f64| {
        if (fa >= 0.0) != (fb >= 0.0) && fa.is_finite() && fb.is_finite() {
            let s = fa / (fa - fb);
            let p = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            if let Ok(q) = newton_project(fam, &p, c) {
                if q.x[0].abs() <= r && q.x[1].abs() <= r && dist(&q.x, &p) <= 2.0 * h {
                    seeds.push([q.x[0], q.x[1]]);
                }
            }
        }
    };
    for i in 0..=m {
        for j in 0..=m {
            let a = [coord(i), coord(j)];
            if i < m {
                push(a, [coord(i + 1), coord(j)], vals[i][j], vals[i + 1][j]);
            }
            if j < m {
                push(a, [coord(i), coord(j + 1)], vals[i][j], vals[i][j + 1]);
            }
        }
    }
    seeds
}

/// Spatial hash of traced segments for the "seed already covered" test.
struct CoverIndex {
    h: f64,
    cells: HashMap<(i64, i64), Vec<([f64; 2], [f64; 2])>>,
}

impl CoverIndex {
    fn new(h: f64) -> Self {
        Self {
            h,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: [f64; 2]) -> (i64, i64) {
        ((p[0] / self.h).floor() as i64, (p[1] / self.h).floor() as i64)
    }

    fn insert(&mut self, _id: usize, pl: &Polyline) {
        let v = &pl.vertices;
        let mut segs: Vec<([f64; 2], [f64; 2])> = v
            .windows(2)
            .map(|w| ([w[0].x[0], w[0].x[1]], [w[1].x[0], w[1].x[1]]))
            .collect();
        if pl.closed && v.len() > 1 {
            let (a, b) = (&v[v.len() - 1], &v[0]);
            segs.push(([a.x[0], a.x[1]], [b.x[0], b.x[1]]));
        }
        if v.len() == 1 {
            segs.push(([v[0].x[0], v[0].x[1]], [v[0].x[0], v[0].x[1]]));
        }
        for s in segs {
            let k = self.key(s.0);
            self.cells.entry(k).or_default().push(s);
        }
    }

    fn covers(&self, p: &[f64; 2], tol: f64) -> bool {
        let (ki, kj) = self.key(*p);
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(segs) = self.cells.get(&(ki + di, kj + dj)) {
                    if segs.iter().any(|(a, b)| point_segment_distance(p, a, b) <= tol) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn point_segment_distance(p: &[f64; 2], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let l2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if l2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - s * ab[0], ap[1] - s * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

struct Tracer<'a> {
    fam: &'a Family,
    c: f64,
    r: f64,
    cell: f64,
    opts: TraceOptions,
}

enum Leg {
    Closed(Vec<[f64; 2]>),
    Open(Vec<[f64; 2]>),
}

impl Tracer<'_> {
    fn tangent(&self, p: &[f64; 2]) -> Option<[f64; 2]> {
        let g = self.fam.x_gradient(p, self.c);
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if !(gn > 1e-14) {
            return None;
        }
        Some([-g[1] / gn, g[0] / gn])
    }

    fn inside(&self, p: &[f64; 2]) -> bool {
        p[0].abs() <= self.r && p[1].abs() <= self.r
    }

    /// Newton correction orthogonal to the predictor direction.
    fn correct(&self, q: [f64; 2], dir: [f64; 2]) -> Option<[f64; 2]> {
        // Move along the normal of the predictor line, which keeps the step
        // length under control even where the curve turns sharply.
        let nrm = [-dir[1], dir[0]];
        let mut x = q;
        for _ in 0..12 {
            let g = self.fam.value(&x, self.c);
            let scale = self.fam.scale(&x, self.c);
            if g.abs() <= NEWTON_TOL * 1e-2 * scale {
                return Some(x);
            }
            let dg = self.fam.x_gradient(&x, self.c);
            let slope = dg[0] * nrm[0] + dg[1] * nrm[1];
            if slope.abs() < 1e-14 * (dg[0].hypot(dg[1])).max(1e-300) {
                return None;
            }
            let s = -g / slope;
            x = [x[0] + s * nrm[0], x[1] + s * nrm[1]];
            if !x[0].is_finite() || !x[1].is_finite() {
                return None;
            }
        }
        let g = self.fam.value(&x, self.c);
        (g.abs() <= NEWTON_TOL * self.fam.scale(&x, self.c)).then_some(x)
    }

    fn trace_from(&self, seed: &[f64; 2]) -> Option<Polyline> {
        let fwd = self.leg(*seed, 1.0);
        let pts = match fwd {
            Leg::Closed(v) => {
                return Some(self.polyline(v, true));
            }
            Leg::Open(f) => {
                let back = match self.leg(*seed, -1.0) {
                    Leg::Open(b) | Leg::Closed(b) => b,
                };
                let mut pts: Vec<[f64; 2]> = back.into_iter().skip(1).rev().collect();
                pts.extend(f);
                pts
            }
        };
        Some(self.polyline(pts, false))
    }

    fn polyline(&self, pts: Vec<[f64; 2]>, closed: bool) -> Polyline {
        Polyline {
            vertices: pts.into_iter().map(|p| Point::new(p.to_vec(), self.c)).collect(),
            closed,
        }
    }

    /// Follows the curve from `start` along `sign * J N`.
    fn leg(&self, start: [f64; 2], sign: f64) -> Leg {
        let max_step = self.opts.max_step_factor * self.cell;
        let min_step = self.opts.min_step_factor * self.cell;
        let mut pts = vec![start];
        let Some(t0) = self.tangent(&start) else {
            return Leg::Open(pts);
        };
        let start_tan = [sign * t0[0], sign * t0[1]];
        let mut p = start;
        let mut tan = start_tan;
        let mut h = max_step * 0.25;
        let mut travelled = 0.0;
        while pts.len() < self.opts.max_vertices {
            // closing test: the seed lies just ahead along the current direction
            if pts.len() > 3 {
                let to_start = [start[0] - p[0], start[1] - p[1]];
                let d = (to_start[0] * to_start[0] + to_start[1] * to_start[1]).sqrt();
                let ahead = to_start[0] * tan[0] + to_start[1] * tan[1];
                let aligned = tan[0] * start_tan[0] + tan[1] * start_tan[1];
                if d <= h.max(min_step) * 1.5 && ahead > 0.5 * d && aligned > 0.9 && travelled > 2.0 * d {
                    return Leg::Closed(pts);
                }
            }
            let mut accepted = None;
            while h >= min_step {
                let q = [p[0] + h * tan[0], p[1] + h * tan[1]];
                if let Some(q) = self.correct(q, tan) {
                    if let Some(tq) = self.tangent(&q) {
                        let tq = [sign * tq[0], sign * tq[1]];
                        let chord = [q[0] - p[0], q[1] - p[1]];
                        let len = (chord[0] * chord[0] + chord[1] * chord[1]).sqrt();
                        let cos_turn = (tan[0] * tq[0] + tan[1] * tq[1]).clamp(-1.0, 1.0);
                        let forward = chord[0] * tan[0] + chord[1] * tan[1];
                        if cos_turn.acos() <= self.opts.max_turn
                            && forward > 0.0
                            && len <= 1.5 * h
                            && len >= 0.5 * h
                        {
                            accepted = Some((q, tq, len, cos_turn.acos()));
                            break;
                        }
                    }
                }
                h *= 0.5;
            }
            let Some((q, tq, len, turn)) = accepted else {
                return Leg::Open(pts);
            };
            if !self.inside(&q) {
                if let Some(b) = self.boundary_point(p, q) {
                    pts.push(b);
                }
                return Leg::Open(pts);
            }
            travelled += len;
            pts.push(q);
            p = q;
            tan = tq;
            if turn < 0.25 * self.opts.max_turn {
                h = (2.0 * h).min(max_step);
            }
        }
        Leg::Open(pts)
    }

    /// Point of the curve on the box boundary between `p` (inside) and `q`.
    fn boundary_point(&self, p: [f64; 2], q: [f64; 2]) -> Option<[f64; 2]> {
        // the coordinate that leaves the box first along the chord
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..2 {
            if q[k].abs() > self.r {
                let wall = self.r * q[k].signum();
                let s = (wall - p[k]) / (q[k] - p[k]);
                if best.is_none_or(|(s0, _, _)| s < s0) {
                    best = Some((s, k, wall));
                }
            }
        }
        let (s, k, wall) = best?;
        let other = 1 - k;
        let mut y = p[other] + s * (q[other] - p[other]);
        let mut x = [0.0; 2];
        x[k] = wall;
        for _ in 0..30 {
            x[other] = y;
            let g = self.fam.value(&x, self.c);
            if g.abs() <= NEWTON_TOL * self.fam.scale(&x, self.c) {
                return Some(x);
            }
            let dg = self.fam.x_gradient(&x, self.c)[other];
            if dg.abs() < 1e-300 {
                break;
            }
            let ny = y - g / dg;
            if (ny - y).abs() > self.cell {
                break;
            }
            y = ny;
        }
        // fall back to the interpolated point when the wall solve misbehaves
        let lo = p[other].min(q[other]);
        let hi = p[other].max(q[other]);
        x[other] = (p[other] + s * (q[other] - p[other])).clamp(lo, hi);
        Some(x)
    }
}

/// One thin-shell sample: a point of `T_c` and the surface measure it stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    pub sp: SurfacePoint,
    pub weight: f64,
}

/// Result of [`thin_shell_samples`].
#[derive(Clone, Debug)]
pub struct ShellBatch {
    pub samples: Vec<WeightedSample>,
    /// Uniform draws in the ball behind the batch.
    pub draws: u64,
    /// Draws that passed the shell test (including failed projections).
    pub accepted: u64,
    /// Accepted draws whose Newton projection failed; they carry zero measure.
    pub projection_failures: u64,
    /// Weight of every accepted draw, `vol(B_R) / (2 delta draws)`.
    pub unit_weight: f64,
}

impl ShellBatch {
    pub fn total_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }

    /// Unbiased estimate of `int_{T_c ∩ B_R} phi` and its standard error, with
    /// failed projections contributing zero.
    pub fn integrate<Fn_: Fn(&SurfacePoint) -> f64>(&self, phi: Fn_) -> (f64, f64) {
        let n = self.draws as f64;
        if n == 0.0 {
            return (0.0, 0.0);
        }
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for s in &self.samples {
            let y = self.unit_weight * n * phi(&s.sp);
            s1 += y;
            s2 += y * y;
        }
        let mean = s1 / n;
        let var = (s2 / n - mean * mean).max(0.0);
        (mean, (var / n).sqrt())
    }
}

/// Co-area estimator of surface integrals over `T_c ∩ B_R`.
///
/// Uniform draws in the ball are kept when `|F(x,c)| < delta |d_x F(x,c)|`,
/// a shell of width about `2 delta` around the level. Each kept draw is
/// Newton-projected onto `T_c` and carries `vol(B_R) / (2 delta N)`, `N` the
/// number of draws, so the weight sum estimates the `(n-1)`-volume of the
/// level in the ball. Draws are consumed in fixed chunks, each with its own
/// counter-based stream, until `count` draws have been accepted.
pub fn thin_shell_samples(
    fam: &Family,
    c: f64,
    ball_radius: f64,
    shell_half_width: f64,
    count: usize,
    seed: u64,
) -> Result<ShellBatch> {
    if !(shell_half_width > 0.0) || count == 0 || !(ball_radius > 0.0) {
        return Err(Error::InvalidArgument(
            "shell half-width, ball radius and count must be positive".into(),
        ));
    }
    let n = fam.n();
    let retry_budget = 20 * count as u64;
    let max_draws = (2_000 * count as u64).max(retry_budget);
    let mut chunks: Vec<ChunkResult> = Vec::new();
    let mut accepted: u64 = 0;
    let mut next_chunk: u64 = 0;
    'outer: loop {
        let round: Vec<ChunkResult> = (next_chunk..next_chunk + SHELL_ROUND)
            .into_par_iter()
            .map(|k| shell_chunk(fam, c, ball_radius, shell_half_width, seed, k))
            .collect();
        next_chunk += SHELL_ROUND;
        for ch in round {
            accepted += ch.accepted;
            chunks.push(ch);
            let draws = chunks.len() as u64 * SHELL_CHUNK;
            if accepted >= count as u64 || draws >= max_draws {
                break 'outer;
            }
            if accepted == 0 && draws >= retry_budget {
                return Err(Error::EmptyLevelInBall);
            }
        }
    }
    if accepted == 0 {
        return Err(Error::EmptyLevelInBall);
    }
    let draws = chunks.len() as u64 * SHELL_CHUNK;
    let unit_weight = rng::ball_volume(n, ball_radius) / (2.0 * shell_half_width * draws as f64);
    let mut samples = Vec::new();
    let mut projection_failures = 0;
    for ch in chunks {
        projection_failures += ch.failures;
        samples.extend(ch.points.into_iter().map(|sp| WeightedSample {
            sp,
            weight: unit_weight,
        }));
    }
    Ok(ShellBatch {
        samples,
        draws,
        accepted,
        projection_failures,
        unit_weight,
    })
}

struct ChunkResult {
    accepted: u64,
    failures: u64,
    points: Vec<SurfacePoint>,
}

fn shell_chunk(fam: &Family, c: f64, r: f64, delta: f64, seed: u64, k: u64) -> ChunkResult {
    let n = fam.n();
    let mut rng = rng::stream(seed, rng::domain::THIN_SHELL, k, 0);
    let mut out = ChunkResult {
        accepted: 0,
        failures: 0,
        points: Vec::new(),
    };
    let mut x = vec![0.0; n];
    for _ in 0..SHELL_CHUNK {
        let u = rng::unit_vector(&mut rng, n);
        let s = rng.random::<f64>().powf(1.0 / n as f64) * r;
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi = ui * s;
        }
        let g = fam.value(&x, c);
        // cheap reject before the gradient: |g| bounded by delta * |grad| is rare
        let dg = fam.x_gradient(&x, c);
        let dn = norm(&dg);
        if !(g.abs() < delta * dn) {
            continue;
        }
        if dn < SHELL_MIN_GRADIENT {
            continue;
        }
        out.accepted += 1;
        match newton_project(fam, &x, c).and_then(|p| surface_point(fam, &p)) {
            Ok(sp) if !sp.critical => out.points.push(sp),
            _ => out.failures += 1,
        }
    }
    out
}
