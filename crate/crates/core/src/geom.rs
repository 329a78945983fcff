//! First- and second-order geometry of `M = {F = 0}` and of its levels `T_c`.
//!
//! With `dF = (d_x F, d_t F)`, the parameter projection `t_M` restricted to `M`
//! has gradient `grad t_M = e_t - <e_t, nu> nu`, i.e.
//! `-(d_t F / |dF|^2) d_x F + (|d_x F|^2 / |dF|^2) e_t`, and
//! `|grad t_M| = |d_x F| / |dF|`. The levels `T_c` are oriented by `d_x F`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::poly::{parse, Point, Polynomial};
use crate::vecops::{dot, householder_complement, norm};

/// `|dF|` below this at a point of `M` contradicts regularity of the value 0.
pub const SINGULAR_GRADIENT: f64 = 1e-12;
/// `|d_x F|` below this marks a critical point of `t_M`.
pub const CRITICAL_POINT: f64 = 1e-12;
/// Relative surface residual accepted by [`surface_point`].
pub const SURFACE_RESIDUAL: f64 = 1e-9;

/// A one-parameter family `F(x, t)` with cached derivative polynomials.
#[derive(Clone, Debug)]
pub struct Family {
    f: Polynomial,
    grad: Vec<Polynomial>,
    hess: Vec<Vec<Polynomial>>,
}

impl Family {
    pub fn new(f: Polynomial) -> Self {
        let grad = f.grad();
        let hess = f.hessian();
        Self { f, grad, hess }
    }

    pub fn parse(text: &str, nvars: usize) -> Result<Self> {
        Ok(Self::new(parse(text, nvars)?))
    }

    /// Number of x-variables.
    pub fn n(&self) -> usize {
        self.f.nvars()
    }

    pub fn poly(&self) -> &Polynomial {
        &self.f
    }

    #[inline]
    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        self.f.eval_at(x, t)
    }

    /// Sum of absolute term values at `(x, t)`: the floating-point scale of `F`
    /// there, used to make residual tests meaningful far from the origin.
    pub fn scale(&self, x: &[f64], t: f64) -> f64 {
        let n = self.n();
        self.f
            .terms()
            .iter()
            .map(|term| {
                let e = &term.exps.0;
                let mut v = term.coeff.abs();
                for i in 0..n {
                    if e[i] != 0 {
                        v *= x[i].abs().powi(e[i] as i32);
                    }
                }
                if e[n] != 0 {
                    v *= t.abs().powi(e[n] as i32);
                }
                v
            })
            .sum::<f64>()
            .max(1.0)
    }

    /// `|F(x, t)|` divided by [`Family::scale`].
    pub fn residual(&self, x: &[f64], t: f64) -> f64 {
        self.value(x, t).abs() / self.scale(x, t)
    }

    /// Full gradient `(d_x F, d_t F)`.
    pub fn gradient(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.grad.iter().map(|g| g.eval_at(x, t)).collect()
    }

    /// `d_x F` only.
    pub fn x_gradient(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.grad[..self.n()].iter().map(|g| g.eval_at(x, t)).collect()
    }

    /// Full `(n+1) x (n+1)` Hessian.
    pub fn hessian(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        self.hess
            .iter()
            .map(|row| row.iter().map(|h| h.eval_at(x, t)).collect())
            .collect()
    }

    /// `n x n` Hessian of `g_t = F(., t)`.
    pub fn x_hessian(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        let n = self.n();
        self.hess[..n]
            .iter()
            .map(|row| row[..n].iter().map(|h| h.eval_at(x, t)).collect())
            .collect()
    }

    /// When `F = f(x) - t`, returns `f`.
    pub fn function_part(&self) -> Option<Polynomial> {
        let n = self.n();
        let dt = &self.grad[n];
        if *dt != Polynomial::constant(n, -1.0) {
            return None;
        }
        let f = &self.f + &Polynomial::var(n, n);
        Some(f)
    }
}

/// A point of `M` with its cached first- and second-order data.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePoint {
    pub p: Point,
    /// Unit normal of `M` in `R^{n+1}`.
    pub nu: Vec<f64>,
    pub nu_x: Vec<f64>,
    pub nu_t: f64,
    pub grad_tm: Vec<f64>,
    /// `d_x F` vanishes (numerically): Gauss map and curvature are undefined.
    pub critical: bool,
    /// Gauss map value `nu_x / |nu_x|` of the level through `p`.
    pub normal: Option<Vec<f64>>,
    /// Gauss-Kronecker curvature of the level through `p`.
    pub kappa: Option<f64>,
    /// `|d_x F|` at `p`.
    pub dx_norm: f64,
}

impl SurfacePoint {
    pub fn grad_tm_norm(&self) -> f64 {
        norm(&self.grad_tm)
    }

    /// `|x| * |grad t_M|`, the quantity bounded below by the Malgrange condition.
    pub fn malgrange_product(&self) -> f64 {
        self.p.radius() * self.grad_tm_norm()
    }
}

/// Builds the [`SurfacePoint`] at `p`, which must lie on `M`.
pub fn surface_point(fam: &Family, p: &Point) -> Result<SurfacePoint> {
    surface_point_with_tol(fam, p, SURFACE_RESIDUAL)
}

pub fn surface_point_with_tol(fam: &Family, p: &Point, tol: f64) -> Result<SurfacePoint> {
    let n = fam.n();
    if p.x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: p.x.len(),
        });
    }
    let residual = fam.residual(&p.x, p.t);
    if !(residual <= tol) {
        return Err(Error::NotOnSurface { residual });
    }
    let g = fam.gradient(&p.x, p.t);
    let gnorm = norm(&g);
    if !(gnorm >= SINGULAR_GRADIENT) {
        return Err(Error::SingularGradient { norm: gnorm });
    }
    let dx = &g[..n];
    let dt = g[n];
    let dx_norm = norm(dx);
    let g2 = gnorm * gnorm;
    let nu: Vec<f64> = g.iter().map(|v| v / gnorm).collect();
    let mut grad_tm: Vec<f64> = dx.iter().map(|v| -dt / g2 * v).collect();
    grad_tm.push(dx_norm * dx_norm / g2);
    let critical = dx_norm < CRITICAL_POINT;
    let (normal, kappa) = if critical {
        (None, None)
    } else {
        let normal: Vec<f64> = dx.iter().map(|v| v / dx_norm).collect();
        let hx = fam.x_hessian(&p.x, p.t);
        let kappa = shape_determinant(&hx, &normal, dx_norm);
        (Some(normal), Some(kappa))
    };
    Ok(SurfacePoint {
        p: p.clone(),
        nu_x: nu[..n].to_vec(),
        nu_t: nu[n],
        nu,
        grad_tm,
        critical,
        normal,
        kappa,
        dx_norm,
    })
}

/// Gauss map value `N = nu_x / |nu_x|`.
pub fn gauss_map(sp: &SurfacePoint) -> Result<Vec<f64>> {
    sp.normal.clone().ok_or(Error::CriticalPoint)
}

/// Gauss-Kronecker curvature of the level `T_t` through `sp`.
///
/// `kappa = det(B^T Hess_x g B) / |grad_x g|^{n-1}` with `B` the Householder
/// complement of `N`, which is `det dN` restricted to the tangent space.
pub fn kronecker_curvature(fam: &Family, sp: &SurfacePoint) -> Result<f64> {
    if sp.critical {
        return Err(Error::CriticalPoint);
    }
    match sp.kappa {
        Some(k) => Ok(k),
        None => {
            let normal = gauss_map(sp)?;
            let hx = fam.x_hessian(&sp.p.x, sp.p.t);
            Ok(shape_determinant(&hx, &normal, sp.dx_norm))
        }
    }
}

fn shape_determinant(hx: &[Vec<f64>], normal: &[f64], dx_norm: f64) -> f64 {
    let basis = householder_complement(normal);
    let m = basis.len();
    if m == 0 {
        return 1.0;
    }
    let hb: Vec<Vec<f64>> = basis
        .iter()
        .map(|b| hx.iter().map(|row| dot(row, b)).collect())
        .collect();
    let s = DMatrix::from_fn(m, m, |i, j| dot(&basis[i], &hb[j]) / dx_norm);
    match m {
        1 => s[(0, 0)],
        2 => s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)],
        _ => s.determinant(),
    }
}
