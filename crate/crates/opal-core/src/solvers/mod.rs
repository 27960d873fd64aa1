//! Matrix-free optimization kernels: a limited-memory quasi-Newton solver
//! with optional nonnegativity-style lower bounds, and a MINRES iteration
//! for symmetric (possibly indefinite) linear systems.

mod lbfgs;
mod minres;

pub use lbfgs::{lbfgs, lbfgs_cb, LbfgsOptions, LbfgsResult, Termination};
pub use minres::{solve_spd_like, KrylovOptions, MinresResult};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
