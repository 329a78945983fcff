//! Helpers shared by the integration tests.
#![allow(dead_code)]

use curvlab::poly::Polynomial;
use curvlab::rng::{self, domain};
use curvlab::Family;
use rand::Rng;

/// Exponent vectors of all monomials in `nvars + 1` variables of total degree `<= degree`.
pub fn monomials(nvars: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..=nvars {
        out = out
            .into_iter()
            .flat_map(|e: Vec<u32>| {
                let used: u32 = e.iter().sum();
                (0..=degree - used).map(move |k| {
                    let mut f = e.clone();
                    f.push(k);
                    f
                })
            })
            .collect();
    }
    out
}

/// Random family of total degree `<= degree` with coefficients in `[-1, 1]`
/// and a `-t` term, so that `d_t F` is not identically zero.
pub fn random_family(nvars: usize, degree: u32, seed: u64, index: u64) -> Family {
    let mut g = rng::stream(seed, domain::RANDOM_FAMILY, index, 0);
    let mut terms: Vec<(f64, Vec<u32>)> = monomials(nvars, degree)
        .into_iter()
        .filter_map(|e| {
            let keep = g.random::<f64>() < 0.7;
            let c = 2.0 * g.random::<f64>() - 1.0;
            keep.then_some((c, e))
        })
        .collect();
    let mut t = vec![0; nvars + 1];
    t[nvars] = 1;
    terms.push((-1.0, t));
    // make sure the top degree is present in x
    let mut top = vec![0; nvars + 1];
    top[0] = degree;
    terms.push((0.5 + g.random::<f64>(), top));
    Family::new(Polynomial::from_terms(nvars, terms))
}
