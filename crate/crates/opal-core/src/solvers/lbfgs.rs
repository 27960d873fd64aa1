//! Limited-memory BFGS with the two-loop recursion (Nocedal's form).
//!
//! Without bounds the step length satisfies the strong Wolfe conditions
//! (bracketing plus zoom). With per-coordinate lower bounds the candidate
//! is projected onto the feasible set after the quasi-Newton step and the
//! step length is chosen by backtracking with an Armijo condition on the
//! actual displacement; the convergence test then uses the projected
//! gradient. The iteration is fully deterministic.

use super::{dot, norm2};
use crate::error::{Error, Result};
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Gradient-norm tolerance (projected gradient with bounds). 0 disables.
    pub gtol: f64,
    /// Relative objective-change tolerance `|df| / max(1, |f|)`. 0 disables.
    pub ftol_rel: f64,
    pub maxiter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant for the strong Wolfe search.
    pub c2: f64,
    /// Optional per-coordinate lower bounds (use `f64::NEG_INFINITY` for
    /// unconstrained coordinates).
    pub lower_bounds: Option<Vec<f64>>,
    /// Cap on the Euclidean length of the very first move, before any
    /// curvature information exists.
    pub first_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 8,
            gtol: 1e-8,
            ftol_rel: 0.0,
            maxiter: 500,
            c1: 1e-4,
            c2: 0.9,
            lower_bounds: None,
            first_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Projected gradient norm fell below `gtol`.
    GtolReached,
    /// Relative objective change fell below `ftol_rel`.
    FtolReached,
    MaxIter,
    /// No feasible step with sufficient decrease was found.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Projected gradient norm at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective value at every accepted iterate, starting with `f(x0)`.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::GtolReached | Termination::FtolReached)
    }
}

fn project(x: &mut [f64], bounds: Option<&[f64]>) {
    if let Some(lb) = bounds {
        for (xi, li) in x.iter_mut().zip(lb) {
            if *xi < *li {
                *xi = *li;
            }
        }
    }
}

/// Gradient with components pointing out of the feasible set zeroed at
/// active bounds: at `x_i == lb_i` only a negative gradient (pushing the
/// coordinate up into the interior) still counts.
fn projected_gradient(x: &[f64], g: &[f64], bounds: Option<&[f64]>) -> Vec<f64> {
    match bounds {
        None => g.to_vec(),
        Some(lb) => x
            .iter()
            .zip(g)
            .zip(lb)
            .map(|((&xi, &gi), &li)| if xi <= li && gi > 0.0 { 0.0 } else { gi })
            .collect(),
    }
}

/// Minimizes `obj` from `x0`. `obj` writes the gradient into its second
/// argument and returns the objective value.
pub fn lbfgs<F>(obj: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    lbfgs_cb(obj, x0, opts, |_, _, _, _| {})
}

/// Like [`lbfgs`] but invokes `iter_cb(iteration, x, f, projected_gnorm)`
/// after every accepted iterate (including the initial point as iteration 0).
pub fn lbfgs_cb<F, C>(mut obj: F, x0: &[f64], opts: &LbfgsOptions, mut iter_cb: C) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    C: FnMut(usize, &[f64], f64, f64),
{
    if !(opts.c1 > 0.0 && opts.c1 < opts.c2 && opts.c2 < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "line search constants must satisfy 0 < c1 < c2 < 1, got c1={} c2={}",
            opts.c1, opts.c2
        )));
    }
    if opts.memory == 0 {
        return Err(Error::InvalidParameter("lbfgs memory must be >= 1".into()));
    }
    if let Some(lb) = &opts.lower_bounds {
        if lb.len() != x0.len() {
            return Err(Error::DimensionMismatch(format!(
                "bounds length {} != variable count {}",
                lb.len(),
                x0.len()
            )));
        }
    }
    let bounds = opts.lower_bounds.as_deref();
    let n = x0.len();

    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let mut g = vec![0.0; n];
    let mut f = obj(&x, &mut g);
    let mut evaluations = 1usize;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective or gradient non-finite at start".into()));
    }
    let mut trace = vec![f];

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut gamma = 1.0;

    let mut pg = projected_gradient(&x, &g, bounds);
    let mut pgnorm = norm2(&pg);
    iter_cb(0, &x, f, pgnorm);

    let mut termination = Termination::MaxIter;
    let mut iterations = 0usize;

    for iter in 0..opts.maxiter {
        // gtol == 0 still stops at an exactly stationary point
        if pgnorm <= opts.gtol {
            termination = Termination::GtolReached;
            break;
        }

        // Two-loop recursion: d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        for di in d.iter_mut() {
            *di *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }

        // Descent safeguard: fall back to steepest descent if the
        // quasi-Newton direction is unusable.
        if dot(&g, &d) >= 0.0 {
            d = pg.iter().map(|v| -v).collect();
            pairs.clear();
            gamma = 1.0;
        }

        let t_init = if pairs.is_empty() {
            let dn = norm2(&d);
            if dn > 0.0 { (opts.first_step / dn).min(1.0) } else { 1.0 }
        } else {
            1.0
        };

        let mut ls = run_search(&mut obj, &x, f, &g, &d, bounds, opts, t_init, &mut evaluations);
        if ls.is_none() && !pairs.is_empty() {
            // Restart: drop the curvature history and retry with a short
            // steepest-descent step before declaring failure.
            pairs.clear();
            gamma = 1.0;
            let d: Vec<f64> = pg.iter().map(|v| -v).collect();
            let dn = norm2(&d);
            let t0 = if dn > 0.0 { (opts.first_step / dn).min(1.0) } else { 1.0 };
            ls = run_search(&mut obj, &x, f, &g, &d, bounds, opts, t0, &mut evaluations);
        }

        let (x_new, f_new, g_new) = match ls {
            Some(v) => v,
            None => {
                termination = Termination::LineSearchFailed;
                break;
            }
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            gamma = sy / dot(&y, &y);
            pairs.push_back((s, y, 1.0 / sy));
        }

        let f_prev = f;
        x = x_new;
        f = f_new;
        g = g_new;
        pg = projected_gradient(&x, &g, bounds);
        pgnorm = norm2(&pg);
        trace.push(f);
        iterations = iter + 1;
        iter_cb(iterations, &x, f, pgnorm);

        if opts.ftol_rel > 0.0 && (f_prev - f).abs() <= opts.ftol_rel * f.abs().max(1.0) {
            termination = Termination::FtolReached;
            break;
        }
        if pgnorm <= opts.gtol {
            termination = Termination::GtolReached;
            break;
        }
    }

    // Termination may still be MaxIter while the tolerance is already met
    // when maxiter == iterations; re-check for an accurate report.
    if termination == Termination::MaxIter && pgnorm <= opts.gtol {
        termination = Termination::GtolReached;
    }

    Ok(LbfgsResult { x, f, grad_norm: pgnorm, iterations, evaluations, trace, termination })
}

type StepResult = Option<(Vec<f64>, f64, Vec<f64>)>;

#[allow(clippy::too_many_arguments)]
fn run_search<F>(
    obj: &mut F,
    x: &[f64],
    f: f64,
    g: &[f64],
    d: &[f64],
    bounds: Option<&[f64]>,
    opts: &LbfgsOptions,
    t_init: f64,
    evaluations: &mut usize,
) -> StepResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if bounds.is_some() {
        backtracking_search(obj, x, f, g, d, bounds, opts.c1, t_init, evaluations)
    } else {
        wolfe_search(obj, x, f, g, d, opts.c1, opts.c2, t_init, evaluations)
    }
}

/// Projected-arc backtracking: evaluates `proj(x + t d)` for shrinking `t`
/// until the Armijo condition holds on the actual displacement.
#[allow(clippy::too_many_arguments)]
fn backtracking_search<F>(
    obj: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    bounds: Option<&[f64]>,
    c1: f64,
    t_init: f64,
    evaluations: &mut usize,
) -> StepResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut t = t_init;
    let mut g = vec![0.0; x.len()];
    for _ in 0..60 {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        project(&mut xt, bounds);
        let step_dot_g: f64 = xt.iter().zip(x).zip(g0).map(|((a, b), gi)| (a - b) * gi).sum();
        if step_dot_g < 0.0 {
            let ft = obj(&xt, &mut g);
            *evaluations += 1;
            if ft.is_finite() && ft <= f0 + c1 * step_dot_g && g.iter().all(|v| v.is_finite()) {
                return Some((xt, ft, g));
            }
        }
        t *= 0.5;
        if t < 1e-20 {
            break;
        }
    }
    None
}

/// Strong Wolfe line search: bracketing phase plus zoom with bisection
/// safeguarded quadratic interpolation. Non-finite trial values are treated
/// as "too far" and bracketed away.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    obj: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    c1: f64,
    c2: f64,
    t_init: f64,
    evaluations: &mut usize,
) -> StepResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dphi0 = dot(g0, d);
    if dphi0 >= 0.0 {
        return None;
    }
    let n = x.len();
    let mut eval = |t: f64, g: &mut Vec<f64>, evaluations: &mut usize| -> (Vec<f64>, f64, f64) {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        let ft = obj(&xt, g);
        *evaluations += 1;
        let dphit = if ft.is_finite() { dot(g, d) } else { f64::NAN };
        (xt, ft, dphit)
    };

    let mut g = vec![0.0; n];
    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = dphi0;
    let mut t = t_init;

    let mut bracket: Option<(f64, f64, f64, f64, f64)> = None; // (lo, f_lo, dphi_lo, hi, f_hi)
    for i in 0..20 {
        let (xt, ft, dphit) = eval(t, &mut g, evaluations);
        if !ft.is_finite() {
            bracket = Some((t_prev, f_prev, dphi_prev, t, f64::INFINITY));
            break;
        }
        if ft > f0 + c1 * t * dphi0 || (i > 0 && ft >= f_prev) {
            bracket = Some((t_prev, f_prev, dphi_prev, t, ft));
            break;
        }
        if dphit.abs() <= -c2 * dphi0 {
            return Some((xt, ft, g));
        }
        if dphit >= 0.0 {
            bracket = Some((t, ft, dphit, t_prev, f_prev));
            break;
        }
        t_prev = t;
        f_prev = ft;
        dphi_prev = dphit;
        t *= 2.0;
        if t > 1e10 {
            return None;
        }
    }

    let (mut lo, mut f_lo, mut dphi_lo, mut hi, mut f_hi) = bracket?;
    let mut best: StepResult = None;
    for _ in 0..40 {
        // Quadratic interpolation using (lo, f_lo, dphi_lo) and f_hi,
        // safeguarded towards bisection.
        let dt = hi - lo;
        let mut tm = if f_hi.is_finite() {
            let denom = 2.0 * (f_hi - f_lo - dphi_lo * dt);
            if denom.abs() > 1e-300 {
                lo - dphi_lo * dt * dt / denom
            } else {
                lo + 0.5 * dt
            }
        } else {
            lo + 0.5 * dt
        };
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let margin = 0.1 * (b - a);
        if !(tm.is_finite() && tm > a + margin && tm < b - margin) {
            tm = lo + 0.5 * dt;
        }
        if (b - a).abs() < 1e-18 {
            break;
        }
        let (xt, ft, dphit) = eval(tm, &mut g, evaluations);
        if !ft.is_finite() {
            hi = tm;
            f_hi = f64::INFINITY;
            continue;
        }
        if ft > f0 + c1 * tm * dphi0 || ft >= f_lo {
            hi = tm;
            f_hi = ft;
        } else {
            if dphit.abs() <= -c2 * dphi0 {
                return Some((xt, ft, g));
            }
            if dphit * dt >= 0.0 {
                hi = lo;
                f_hi = f_lo;
            }
            lo = tm;
            f_lo = ft;
            dphi_lo = dphit;
            // Keep the best sufficient-decrease point in case the curvature
            // condition is never met within the iteration budget.
            best = Some((xt, ft, g.clone()));
        }
    }
    best
}
