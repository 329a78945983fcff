//! Numerical laboratory for total Gauss-Kronecker curvature of the levels of
//! polynomial families `F(x, t) = 0`, and for regularity at infinity of the
//! parameter projection `t_M`.

pub mod asym;
pub mod cli;
pub mod crofton;
pub mod curv;
pub mod error;
pub mod flow;
pub mod geom;
pub mod poly;
pub mod rng;
pub mod sample;
pub mod vecops;

pub use error::{Error, Result};
pub use geom::{Family, SurfacePoint};
pub use poly::{Point, Polynomial};
