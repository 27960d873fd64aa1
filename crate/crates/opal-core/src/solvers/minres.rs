//! MINRES (Paige & Saunders) for symmetric linear systems, used to apply the
//! inverse of the lower-level Hessian inside the parameter gradient. Chosen
//! over plain conjugate gradients because the non-convex penalties make the
//! Hessian only approximately positive definite away from strict minima.

use super::{dot, norm2};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KrylovOptions {
    /// Relative residual tolerance `||Hp - b|| <= rtol * ||b||`.
    pub rtol: f64,
    /// Iteration cap; defaults to 10x the problem dimension.
    pub maxiter: Option<usize>,
    /// Tikhonov shift applied on the first attempt (normally 0). On
    /// stagnation the solve is retried once with a positive shift
    /// (`max(shift * 10, 1e-6)`), flagged in the diagnostics.
    pub shift: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, maxiter: None, shift: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct MinresResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual of the (possibly shifted) system that was
    /// solved, measured after the iteration finished.
    pub rel_residual: f64,
    /// Shift actually in effect for the returned solution.
    pub shift_used: f64,
    pub converged: bool,
}

/// Solves `H p = b` for a symmetric operator given only through
/// matrix-vector products. Returns a hard error when the retry with a
/// Tikhonov shift also fails to converge.
pub fn solve_spd_like<F>(mut hvp: F, b: &[f64], opts: &KrylovOptions) -> Result<MinresResult>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if opts.rtol <= 0.0 {
        return Err(Error::InvalidParameter("krylov rtol must be positive".into()));
    }
    let n = b.len();
    let maxiter = opts.maxiter.unwrap_or(10 * n.max(1));

    #[cfg(debug_assertions)]
    spot_check_symmetry(&mut hvp, n);

    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(MinresResult {
            x: vec![0.0; n],
            iterations: 0,
            rel_residual: 0.0,
            shift_used: opts.shift,
            converged: true,
        });
    }

    let mut shift = opts.shift;
    for attempt in 0..2 {
        let mut apply = |v: &[f64]| -> Vec<f64> {
            let mut hv = hvp(v);
            if shift != 0.0 {
                for (h, vi) in hv.iter_mut().zip(v) {
                    *h += shift * vi;
                }
            }
            hv
        };
        let (x, iterations) = minres_core(&mut apply, b, bnorm, opts.rtol, maxiter);
        let hx = apply(&x);
        let res: f64 = hx.iter().zip(b).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        let rel = res / bnorm;
        if rel <= opts.rtol {
            return Ok(MinresResult { x, iterations, rel_residual: rel, shift_used: shift, converged: true });
        }
        if attempt == 0 {
            shift = (opts.shift * 10.0).max(1e-6);
        } else {
            return Err(Error::NoConvergence(format!(
                "minres stalled at relative residual {rel:.3e} (target {:.1e}) even with shift {shift:.1e}",
                opts.rtol
            )));
        }
    }
    unreachable!()
}

fn minres_core<F>(apply: &mut F, b: &[f64], beta1: f64, rtol: f64, maxiter: usize) -> (Vec<f64>, usize)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut r2 = b.to_vec();
    let mut y = b.to_vec();

    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];

    let mut iterations = 0;
    for itn in 1..=maxiter {
        iterations = itn;
        let s = 1.0 / beta;
        let v: Vec<f64> = y.iter().map(|yi| s * yi).collect();
        y = apply(&v);
        if itn >= 2 {
            let c = beta / oldb;
            for (yi, r) in y.iter_mut().zip(&r1) {
                *yi -= c * r;
            }
        }
        let alfa = dot(&v, &y);
        let c = alfa / beta;
        for (yi, r) in y.iter_mut().zip(&r2) {
            *yi -= c * r;
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        oldb = beta;
        beta = norm2(&r2);

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;

        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        // w, w2 shuffle: w1 <- w2 <- w <- new direction
        let w1 = std::mem::replace(&mut w2, std::mem::take(&mut w));
        w = v;
        for i in 0..n {
            w[i] = (w[i] - oldeps * w1[i] - delta * w2[i]) / gamma;
            x[i] += phi * w[i];
        }

        if phibar <= rtol * beta1 || beta < 1e-300 {
            break;
        }
    }
    (x, iterations)
}

/// Debug-only sanity check that the supplied operator is symmetric, probed
/// on two deterministic pseudo-random vector pairs.
#[cfg(debug_assertions)]
fn spot_check_symmetry<F>(hvp: &mut F, n: usize)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if n == 0 {
        return;
    }
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for _ in 0..2 {
        let v: Vec<f64> = (0..n).map(|_| next()).collect();
        let u: Vec<f64> = (0..n).map(|_| next()).collect();
        let hv = hvp(&v);
        let hu = hvp(&u);
        let a = dot(&hv, &u);
        let b = dot(&v, &hu);
        let scale = norm2(&hv) * norm2(&u) + norm2(&v) * norm2(&hu) + 1e-300;
        debug_assert!(
            (a - b).abs() <= 1e-8 * scale,
            "operator handed to minres is not symmetric: <Hv,u>={a}, <v,Hu>={b}"
        );
    }
}
