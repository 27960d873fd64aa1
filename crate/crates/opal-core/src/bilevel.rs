//! Bi-level training of the filter bank.
//!
//! The outer problem minimizes the squared reconstruction loss of the
//! lower-level MAP solution over the filter weights and coefficients. The
//! parameter gradient is computed exactly (matrix-free) by solving one
//! linear system with the lower-level Hessian per training sample:
//!
//! ```text
//! p       = H_E(u*)^{-1} (u* - g)
//! dL/da_i = - < A_i^T phi'(A_i u*), p >
//! dL/db_ij= - a_i < B_j^T phi'(A_i u*) + A_i^T (phi''(A_i u*) ⊙ B_j u*), p >
//! ```
//!
//! which is valid only when `u*` satisfies the lower-level optimality
//! condition to high accuracy; sloppy inner solves poison the outer
//! gradient, so non-converged lower solves abort training.

use crate::basis::dct_basis;
use crate::energy::{EnergyModel, FilterBank, HessOperator, LowerSolveOptions};
use crate::error::{Error, Result};
use crate::image::{conv2_sym_into, Image};
use crate::penalty::Penalty;
use crate::solvers::{lbfgs_cb, solve_spd_like, KrylovOptions, LbfgsOptions, Termination};
use rayon::prelude::*;
use std::sync::Mutex;
use std::time::Instant;

/// One (noisy, ground-truth) pair.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub f: Image,
    pub g: Image,
}

impl TrainingSample {
    pub fn new(f: Image, g: Image) -> Result<Self> {
        if !f.same_size(&g) {
            return Err(Error::DimensionMismatch(format!(
                "sample pair {}x{} vs {}x{}",
                f.width(),
                f.height(),
                g.width(),
                g.height()
            )));
        }
        Ok(Self { f, g })
    }
}

/// Squared reconstruction loss `0.5 ||u - g||^2`.
pub fn loss(u: &Image, g: &Image) -> Result<f64> {
    if !u.same_size(g) {
        return Err(Error::DimensionMismatch("loss: image sizes differ".into()));
    }
    Ok(0.5
        * u.data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

#[derive(Debug, Clone)]
pub struct ParamGradOptions {
    /// Optimality tolerance `u_star` must satisfy; violating it is a hard
    /// error because the adjoint formula assumes a stationary inner point.
    pub grad_tol: f64,
    pub krylov: KrylovOptions,
}

impl Default for ParamGradOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-3, krylov: KrylovOptions::default() }
    }
}

/// Loss gradient with respect to all filter weights and coefficients.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub alpha: Vec<f64>,
    /// `beta[i][j]`: gradient for coefficient `j` of filter `i`.
    pub beta: Vec<Vec<f64>>,
    pub krylov_iterations: usize,
    pub krylov_shift: f64,
}

/// Exact gradient of `0.5 ||u*(theta) - g||^2` with respect to the filter
/// parameters, at a solved lower-level point `u_star`. Requires the
/// training configuration (`K = I`, `lambda = 1`).
pub fn param_grad(
    model: &EnergyModel,
    sample: &TrainingSample,
    u_star: &Image,
    opts: &ParamGradOptions,
) -> Result<ParamGrad> {
    let (w, h) = (u_star.width(), u_star.height());
    if !u_star.same_size(&sample.f) {
        return Err(Error::DimensionMismatch("u_star does not match the sample size".into()));
    }

    let residual_norm = {
        let grad = model.grad_u(u_star, &sample.f)?;
        grad.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    if residual_norm > opts.grad_tol {
        return Err(Error::InvalidParameter(format!(
            "u_star violates the lower-level optimality tolerance: ||grad|| = {residual_norm:.3e} > {:.1e}",
            opts.grad_tol
        )));
    }

    let mut hess = HessOperator::new(model, u_star)?;
    let b: Vec<f64> = u_star.data().iter().zip(sample.g.data()).map(|(a, c)| a - c).collect();
    let solve = solve_spd_like(|v| hess.apply(v), &b, &opts.krylov)?;
    let p = solve.x;

    let n = model.filters().len();
    let kernels = model.kernels();
    let alpha = model.filters().alpha();
    let penalty = model.penalty();

    // Per-filter responses and penalty derivatives at u*, plus A_i p.
    let mut resp = vec![0.0; w * h];
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for kern in kernels {
        conv2_sym_into(u_star.data(), w, h, kern, &mut resp);
        d1.push(resp.iter().map(|&z| penalty.d1(z)).collect::<Vec<f64>>());
        d2.push(resp.iter().map(|&z| penalty.d2(z)).collect::<Vec<f64>>());
        conv2_sym_into(&p, w, h, kern, &mut resp);
        q.push(resp.clone());
    }

    let grad_alpha: Vec<f64> = (0..n)
        .map(|i| -d1[i].iter().zip(&q[i]).map(|(a, b)| a * b).sum::<f64>())
        .collect();

    let basis = model.filters().basis();
    let mut grad_beta = vec![vec![0.0; basis.len()]; n];
    let mut bu = vec![0.0; w * h];
    let mut bp = vec![0.0; w * h];
    for (j, atom) in basis.atoms().iter().enumerate() {
        conv2_sym_into(u_star.data(), w, h, atom, &mut bu);
        conv2_sym_into(&p, w, h, atom, &mut bp);
        for i in 0..n {
            let mut first = 0.0;
            let mut second = 0.0;
            let (d1i, d2i, qi) = (&d1[i], &d2[i], &q[i]);
            for idx in 0..w * h {
                first += d1i[idx] * bp[idx];
                second += d2i[idx] * bu[idx] * qi[idx];
            }
            grad_beta[i][j] = -alpha[i] * (first + second);
        }
    }

    Ok(ParamGrad {
        alpha: grad_alpha,
        beta: grad_beta,
        krylov_iterations: solve.iterations,
        krylov_shift: solve.shift_used,
    })
}

/// Which parameters the outer problem optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Free weights and coefficients: `theta = (alpha, beta)`.
    FreeFilters,
    /// Frozen unit-norm filter directions; only per-filter scale and
    /// weight are trained: `theta = (alpha, s)`, `A_i = s_i D_i`.
    FixedDirections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStyle {
    /// Coordinate rows over the basis: filter `i` is the scaled atom `i`.
    Dct,
    /// Seeded Gaussian coefficients rescaled to the requested norm.
    Random,
}

/// Initial filter bank specification.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FilterInit {
    pub kernel_size: usize,
    pub count: usize,
    pub style: InitStyle,
    /// Frobenius norm of every initial kernel.
    pub norm: f64,
    /// Initial value of every weight `alpha_i`.
    pub weight: f64,
}

impl Default for FilterInit {
    fn default() -> Self {
        Self { kernel_size: 7, count: 48, style: InitStyle::Dct, norm: 0.01, weight: 1.0 }
    }
}

/// Builds the initial bank: unit-coordinate (dct style) or seeded-Gaussian
/// (random style) coefficient rows, rescaled so every kernel has Frobenius
/// norm `init.norm`, with all weights set to `init.weight`.
pub fn init_filterbank(init: &FilterInit, seed: u64) -> Result<FilterBank> {
    if init.count == 0 {
        return Err(Error::InvalidParameter("filter count must be positive".into()));
    }
    if !(init.norm > 0.0) || !(init.weight >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "initial norm must be positive and weight nonnegative, got norm={} weight={}",
            init.norm, init.weight
        )));
    }
    let basis = dct_basis(init.kernel_size)?;
    let nb = basis.len();
    let beta: Vec<Vec<f64>> = match init.style {
        InitStyle::Dct => {
            if init.count > nb {
                return Err(Error::InvalidParameter(format!(
                    "dct-style init supports at most {nb} filters for kernel size {}, requested {}",
                    init.kernel_size, init.count
                )));
            }
            (0..init.count)
                .map(|i| {
                    let mut row = vec![0.0; nb];
                    row[i] = init.norm;
                    row
                })
                .collect()
        }
        InitStyle::Random => {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..init.count)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..nb).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // basis is orthonormal, so the coefficient norm is the
                    // kernel Frobenius norm
                    row.iter_mut().for_each(|v| *v *= init.norm / norm);
                    row
                })
                .collect()
        }
    };
    FilterBank::new(basis, beta, vec![init.weight; init.count])
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub penalty: Penalty,
    pub init: FilterInit,
    pub mode: TrainMode,
    /// Gradient tolerance for every lower-level solve.
    pub lower_gtol: f64,
    /// Iteration cap for lower-level solves; exceeding it aborts training.
    pub lower_maxiter: usize,
    /// Outer stop: relative loss change below this.
    pub outer_ftol_rel: f64,
    pub outer_maxiter: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::log_square(),
            init: FilterInit::default(),
            mode: TrainMode::FreeFilters,
            lower_gtol: 1e-3,
            lower_maxiter: 2000,
            outer_ftol_rel: 1e-5,
            outer_maxiter: 500,
            seed: 0,
        }
    }
}

/// One line of the training log, emitted per accepted outer iteration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_mean: f64,
    pub beta_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Bank of the best loss seen over all evaluations (not necessarily
    /// the last iterate: line-search failure can end on a worse point).
    pub bank: FilterBank,
    pub records: Vec<TrainRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub outer_iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Parameter vector layout for one training mode.
struct Packing {
    n: usize,
    nb: usize,
    mode: TrainMode,
    /// Unit-norm coefficient directions, used in fixed-directions mode.
    directions: Vec<Vec<f64>>,
}

impl Packing {
    fn dim(&self) -> usize {
        match self.mode {
            TrainMode::FreeFilters => self.n + self.n * self.nb,
            TrainMode::FixedDirections => 2 * self.n,
        }
    }

    fn pack(&self, bank: &FilterBank) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(bank.alpha());
        match self.mode {
            TrainMode::FreeFilters => {
                for row in bank.beta() {
                    x.extend_from_slice(row);
                }
            }
            TrainMode::FixedDirections => {
                for row in bank.beta() {
                    x.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], bank: &FilterBank) -> Result<FilterBank> {
        let alpha = x[..self.n].to_vec();
        let beta: Vec<Vec<f64>> = match self.mode {
            TrainMode::FreeFilters => {
                (0..self.n).map(|i| x[self.n + i * self.nb..self.n + (i + 1) * self.nb].to_vec()).collect()
            }
            TrainMode::FixedDirections => {
                let scales = &x[self.n..2 * self.n];
                self.directions
                    .iter()
                    .zip(scales)
                    .map(|(dir, s)| dir.iter().map(|d| s * d).collect())
                    .collect()
            }
        };
        FilterBank::new(bank.basis().clone(), beta, alpha)
    }

    fn pack_grad(&self, pg_alpha: &[f64], pg_beta: &[Vec<f64>]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.dim());
        g.extend_from_slice(pg_alpha);
        match self.mode {
            TrainMode::FreeFilters => {
                for row in pg_beta {
                    g.extend_from_slice(row);
                }
            }
            TrainMode::FixedDirections => {
                for (dir, row) in self.directions.iter().zip(pg_beta) {
                    g.push(dir.iter().zip(row).map(|(d, r)| d * r).sum());
                }
            }
        }
        g
    }
}

/// Trains starting from the bank described by `cfg.init`.
pub fn train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let bank = init_filterbank(&cfg.init, cfg.seed)?;
    train_with_init(samples, cfg, bank)
}

/// Trains starting from an explicit bank (used to resume from a model).
pub fn train_with_init(
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    bank: FilterBank,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("training needs at least one sample".into()));
    }
    if !(cfg.lower_gtol > 0.0) || !(cfg.outer_ftol_rel > 0.0) {
        return Err(Error::InvalidParameter("training tolerances must be positive".into()));
    }
    let n = bank.len();
    let nb = bank.basis().len();
    let directions = match cfg.mode {
        TrainMode::FreeFilters => Vec::new(),
        TrainMode::FixedDirections => bank
            .beta()
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "fixed-directions mode requires a nonzero direction for filter {i}"
                    )));
                }
                Ok(row.iter().map(|v| v / norm).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?,
    };
    let packing = Packing { n, nb, mode: cfg.mode, directions };

    let x0 = packing.pack(&bank);
    let mut lower_bounds = vec![f64::NEG_INFINITY; packing.dim()];
    lower_bounds[..n].fill(0.0); // alpha >= 0

    let lower_opts = LowerSolveOptions { gtol: cfg.lower_gtol, maxiter: cfg.lower_maxiter };
    let pg_opts = ParamGradOptions { grad_tol: cfg.lower_gtol, krylov: KrylovOptions::default() };

    let start = Instant::now();
    let records: Mutex<Vec<TrainRecord>> = Mutex::new(Vec::new());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut abort: Option<Error> = None;
    let mut evaluations = 0usize;

    let lbfgs_opts = LbfgsOptions {
        memory: 8,
        gtol: 0.0,
        ftol_rel: cfg.outer_ftol_rel,
        maxiter: cfg.outer_maxiter,
        lower_bounds: Some(lower_bounds),
        first_step: 0.1,
        ..Default::default()
    };

    let result = {
        let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
            if abort.is_some() {
                grad.fill(0.0);
                return f64::INFINITY;
            }
            evaluations += 1;
            let current = match packing.unpack(x, &bank) {
                Ok(b) => b,
                Err(e) => {
                    abort = Some(e);
                    grad.fill(0.0);
                    return f64::INFINITY;
                }
            };
            let model = match EnergyModel::training(current, cfg.penalty) {
                Ok(m) => m,
                Err(e) => {
                    abort = Some(e);
                    grad.fill(0.0);
                    return f64::INFINITY;
                }
            };
            // Per-sample solves run in parallel; the reduction below is
            // sequential in sample order so results are identical for any
            // worker count. A lower solve that misses its tolerance makes
            // this evaluation +inf: the line search backs off and no
            // gradient is ever computed from a sloppy inner solution. Only
            // a stall at the very first evaluation (the initial parameters)
            // is a hard error, since there is nothing to back off to.
            let first_eval = evaluations == 1;
            let per_sample: Result<Vec<Option<(f64, ParamGrad)>>> = samples
                .par_iter()
                .map(|sample| {
                    let (u, diag) = model.solve_lower(&sample.f, &sample.f, &lower_opts)?;
                    if !diag.converged {
                        if first_eval {
                            return Err(Error::NoConvergence(format!(
                                "lower-level solve stalled at ||grad|| = {:.3e} after {} iterations (tolerance {:.1e}) at the initial parameters",
                                diag.grad_norm, diag.iterations, cfg.lower_gtol
                            )));
                        }
                        return Ok(None);
                    }
                    let l = loss(&u, &sample.g)?;
                    let pg = param_grad(&model, sample, &u, &pg_opts)?;
                    Ok(Some((l, pg)))
                })
                .collect();
            let per_sample = match per_sample {
                Ok(v) => v,
                Err(e) => {
                    abort = Some(e);
                    grad.fill(0.0);
                    return f64::INFINITY;
                }
            };
            let Some(per_sample) = per_sample.into_iter().collect::<Option<Vec<(f64, ParamGrad)>>>()
            else {
                // some lower solve missed its tolerance: reject this trial
                grad.fill(0.0);
                return f64::INFINITY;
            };
            let mut total = 0.0;
            let mut ga = vec![0.0; n];
            let mut gb = vec![vec![0.0; nb]; n];
            for (l, pg) in &per_sample {
                total += l;
                for (a, b) in ga.iter_mut().zip(&pg.alpha) {
                    *a += b;
                }
                for (rows, prow) in gb.iter_mut().zip(&pg.beta) {
                    for (a, b) in rows.iter_mut().zip(prow) {
                        *a += b;
                    }
                }
            }
            grad.copy_from_slice(&packing.pack_grad(&ga, &gb));
            if best.as_ref().map_or(true, |(bl, _)| total < *bl) {
                best = Some((total, x.to_vec()));
            }
            total
        };

        lbfgs_cb(objective, &x0, &lbfgs_opts, |iteration, x, f, gnorm| {
            let alpha = &x[..n];
            let beta_norm = match cfg.mode {
                TrainMode::FreeFilters => x[n..].iter().map(|v| v * v).sum::<f64>().sqrt(),
                TrainMode::FixedDirections => x[n..2 * n].iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            records.lock().unwrap().push(TrainRecord {
                iteration,
                loss: f,
                grad_norm: gnorm,
                alpha_min: alpha.iter().cloned().fold(f64::INFINITY, f64::min),
                alpha_max: alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                alpha_mean: alpha.iter().sum::<f64>() / n as f64,
                beta_norm,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        })?
    };

    if let Some(e) = abort {
        return Err(e);
    }
    let (best_loss, best_x) = best.expect("at least one evaluation");
    let records = records.into_inner().unwrap();
    let initial_loss = records.first().map(|r| r.loss).unwrap_or(best_loss);
    Ok(TrainOutcome {
        bank: packing.unpack(&best_x, &bank)?,
        records,
        initial_loss,
        final_loss: best_loss,
        outer_iterations: result.iterations,
        evaluations,
        termination: result.termination,
    })
}
