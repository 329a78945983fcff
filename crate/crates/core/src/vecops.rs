//! Small dense-vector helpers on slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|v| v * s).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Unit vector in the direction of `a`, or `None` when `|a|` is zero.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    (n > 0.0).then(|| scaled(a, 1.0 / n))
}

/// Orthonormal basis of the complement of the unit vector `u`, taken from the
/// columns of the Householder reflection that maps `e_k` to `u` (`k` is the
/// coordinate where `|u_k|` is largest). Deterministic in `u`.
pub fn householder_complement(u: &[f64]) -> Vec<Vec<f64>> {
    let n = u.len();
    let k = (0..n)
        .max_by(|&i, &j| u[i].abs().total_cmp(&u[j].abs()))
        .unwrap_or(0);
    // v = u - s e_k with s = -sign(u_k) keeps the reflection well conditioned.
    let s = if u[k] >= 0.0 { -1.0 } else { 1.0 };
    let mut v = u.to_vec();
    v[k] -= s;
    let vv = dot(&v, &v);
    let mut basis = Vec::with_capacity(n.saturating_sub(1));
    for j in (0..n).filter(|&j| j != k) {
        // column j of I - 2 v v^T / (v^T v)
        let mut col: Vec<f64> = v.iter().map(|vi| -2.0 * vi * v[j] / vv).collect();
        col[j] += 1.0;
        basis.push(col);
    }
    basis
}

/// Removes from `v` its components along the orthonormal vectors `dirs`.
pub fn project_out(v: &mut [f64], dirs: &[Vec<f64>]) {
    for d in dirs {
        let c = dot(v, d);
        axpy(-c, d, v);
    }
}

/// Gram-Schmidt on `vecs`, dropping vectors that are (numerically) dependent.
pub fn orthonormalize(vecs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vecs {
        let mut w = v.clone();
        project_out(&mut w, &out);
        project_out(&mut w, &out);
        let n = norm(&w);
        let scale = norm(v).max(f64::MIN_POSITIVE);
        if n > 1e-12 * scale {
            out.push(scaled(&w, 1.0 / n));
        }
    }
    out
}
