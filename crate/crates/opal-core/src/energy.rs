//! The image-based analysis energy
//!
//! ```text
//! E(u) = sum_i alpha_i * sum_p phi((A_i * u)_p) + (lambda/2) ||K u - f||^2
//! ```
//!
//! with filters `A_i = sum_j beta_ij B_j` over the zero-mean basis, a
//! generic linear data operator `K`, its exact gradient and matrix-free
//! Hessian-vector product, and the quasi-Newton lower-level (MAP) solver.

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::image::{conv2_adjoint_acc, conv2_sym_into, Image, Kernel};
use crate::penalty::Penalty;
use crate::solvers::{lbfgs, LbfgsOptions};

/// Bank of `n` learned filters: nonnegative weights `alpha_i` plus
/// coefficient rows `beta_i` over a shared zero-mean orthonormal basis.
/// Assembled kernels inherit the zero-mean property from the basis.
#[derive(Debug, Clone)]
pub struct FilterBank {
    basis: BasisSet,
    beta: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

impl FilterBank {
    pub fn new(basis: BasisSet, beta: Vec<Vec<f64>>, alpha: Vec<f64>) -> Result<Self> {
        if beta.len() != alpha.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} beta rows vs {} weights",
                beta.len(),
                alpha.len()
            )));
        }
        for (i, row) in beta.iter().enumerate() {
            if row.len() != basis.len() {
                return Err(Error::DimensionMismatch(format!(
                    "beta row {i} has {} coefficients, basis has {} atoms",
                    row.len(),
                    basis.len()
                )));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("beta row {i} contains non-finite values")));
            }
        }
        for (i, &a) in alpha.iter().enumerate() {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "filter weight alpha[{i}] = {a} must be finite and nonnegative"
                )));
            }
        }
        Ok(Self { basis, beta, alpha })
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    /// Filter count.
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn kernel_size(&self) -> usize {
        self.basis.kernel_size()
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Assembles kernel `i = sum_j beta_ij B_j` for every filter.
    pub fn assemble(&self) -> Vec<Kernel> {
        let k = self.kernel_size();
        self.beta
            .iter()
            .map(|row| {
                let mut kern = Kernel::new(k, vec![0.0; k * k]).expect("zero kernel");
                for (c, atom) in row.iter().zip(self.basis.atoms()) {
                    kern.add_scaled(*c, atom);
                }
                kern
            })
            .collect()
    }
}

/// Linear data operator `K` of the restoration energy.
#[derive(Debug, Clone)]
pub enum DataOperator {
    Identity,
    /// Diagonal sampling operator; mask values are exactly 0 (missing) or
    /// 1 (observed).
    Mask(Image),
    /// Convolution with a normalized kernel under the same symmetric
    /// boundary rule as the prior filters.
    Blur(Kernel),
    /// Blur followed by decimation anchored at pixel (0, 0) of each
    /// `factor x factor` cell.
    DownsampleBlur { factor: usize, blur: Kernel },
}

impl DataOperator {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataOperator::Identity => Ok(()),
            DataOperator::Mask(m) => {
                if m.data().iter().all(|&v| v == 0.0 || v == 1.0) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter("mask values must be exactly 0 or 1".into()))
                }
            }
            DataOperator::Blur(k) => {
                if (k.sum() - 1.0).abs() <= 1e-12 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "blur kernel taps must sum to 1, got {}",
                        k.sum()
                    )))
                }
            }
            DataOperator::DownsampleBlur { factor, blur } => {
                if *factor < 2 {
                    return Err(Error::InvalidParameter(format!(
                        "downsampling factor must be >= 2, got {factor}"
                    )));
                }
                if (blur.sum() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "blur kernel taps must sum to 1, got {}",
                        blur.sum()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Whether `K` has a nontrivial nullspace (so the data term alone does
    /// not pin down the image).
    pub fn has_nullspace(&self) -> bool {
        matches!(self, DataOperator::Mask(_) | DataOperator::DownsampleBlur { .. })
    }

    /// Output dimensions for a `w x h` input.
    pub fn range_dims(&self, w: usize, h: usize) -> (usize, usize) {
        match self {
            DataOperator::DownsampleBlur { factor, .. } => (w.div_ceil(*factor), h.div_ceil(*factor)),
            _ => (w, h),
        }
    }

    fn check_domain(&self, w: usize, h: usize) -> Result<()> {
        match self {
            DataOperator::Mask(m) => {
                if m.width() != w || m.height() != h {
                    return Err(Error::DimensionMismatch(format!(
                        "mask {}x{} vs image {w}x{h}",
                        m.width(),
                        m.height()
                    )));
                }
            }
            DataOperator::Blur(k) | DataOperator::DownsampleBlur { blur: k, .. } => {
                if k.size() > w || k.size() > h {
                    return Err(Error::DimensionMismatch(format!(
                        "blur kernel {} larger than image {w}x{h}",
                        k.size()
                    )));
                }
            }
            DataOperator::Identity => {}
        }
        Ok(())
    }

    /// `K u`. Output size is `range_dims` of the input.
    pub fn apply(&self, u: &Image) -> Result<Image> {
        self.validate()?;
        self.check_domain(u.width(), u.height())?;
        let (rw, rh) = self.range_dims(u.width(), u.height());
        let mut out = vec![0.0; rw * rh];
        let mut scratch = Scratch::for_operator(self, u.width(), u.height());
        self.apply_into(u.data(), u.width(), u.height(), &mut out, &mut scratch);
        Image::new(rw, rh, out)
    }

    /// `K^T v` for a range-sized `v`, producing a `w x h` domain image.
    pub fn apply_adjoint(&self, v: &Image, w: usize, h: usize) -> Result<Image> {
        self.validate()?;
        self.check_domain(w, h)?;
        let (rw, rh) = self.range_dims(w, h);
        if v.width() != rw || v.height() != rh {
            return Err(Error::DimensionMismatch(format!(
                "adjoint input {}x{} vs operator range {rw}x{rh}",
                v.width(),
                v.height()
            )));
        }
        let mut out = vec![0.0; w * h];
        let mut scratch = Scratch::for_operator(self, w, h);
        self.adjoint_acc(v.data(), w, h, 1.0, &mut out, &mut scratch);
        Image::new(w, h, out)
    }

    fn apply_into(&self, u: &[f64], w: usize, h: usize, out: &mut [f64], scratch: &mut Scratch) {
        match self {
            DataOperator::Identity => out.copy_from_slice(u),
            DataOperator::Mask(m) => {
                for ((o, ui), mi) in out.iter_mut().zip(u).zip(m.data()) {
                    *o = ui * mi;
                }
            }
            DataOperator::Blur(k) => conv2_sym_into(u, w, h, k, out),
            DataOperator::DownsampleBlur { factor, blur } => {
                conv2_sym_into(u, w, h, blur, &mut scratch.domain);
                let (rw, rh) = self.range_dims(w, h);
                for y in 0..rh {
                    for x in 0..rw {
                        out[y * rw + x] = scratch.domain[(y * factor) * w + x * factor];
                    }
                }
            }
        }
    }

    /// `acc += scale * K^T v`.
    fn adjoint_acc(
        &self,
        v: &[f64],
        w: usize,
        h: usize,
        scale: f64,
        acc: &mut [f64],
        scratch: &mut Scratch,
    ) {
        match self {
            DataOperator::Identity => {
                for (a, vi) in acc.iter_mut().zip(v) {
                    *a += scale * vi;
                }
            }
            DataOperator::Mask(m) => {
                for ((a, vi), mi) in acc.iter_mut().zip(v).zip(m.data()) {
                    *a += scale * vi * mi;
                }
            }
            DataOperator::Blur(k) => {
                let r = k.size() / 2;
                let need = (w + 2 * r) * (h + 2 * r);
                conv2_adjoint_acc(v, w, h, k, scale, &mut scratch.pad[..need], acc);
            }
            DataOperator::DownsampleBlur { factor, blur } => {
                // zero-insertion upsample, then the blur adjoint
                let (rw, rh) = self.range_dims(w, h);
                scratch.domain.fill(0.0);
                for y in 0..rh {
                    for x in 0..rw {
                        scratch.domain[(y * factor) * w + x * factor] = v[y * rw + x];
                    }
                }
                let r = blur.size() / 2;
                let need = (w + 2 * r) * (h + 2 * r);
                let (domain, pad) = (&mut scratch.domain, &mut scratch.pad);
                conv2_adjoint_acc(domain, w, h, blur, scale, &mut pad[..need], acc);
            }
        }
    }
}

/// Scratch buffers reused across energy evaluations.
struct Scratch {
    resp: Vec<f64>,
    pad: Vec<f64>,
    range: Vec<f64>,
    domain: Vec<f64>,
}

impl Scratch {
    fn new(model: &EnergyModel, w: usize, h: usize) -> Self {
        let mut r_max = model.filters.kernel_size() / 2;
        if let DataOperator::Blur(k) | DataOperator::DownsampleBlur { blur: k, .. } = &model.k_op {
            r_max = r_max.max(k.size() / 2);
        }
        let (rw, rh) = model.k_op.range_dims(w, h);
        Self {
            resp: vec![0.0; w * h],
            pad: vec![0.0; (w + 2 * r_max) * (h + 2 * r_max)],
            range: vec![0.0; rw * rh],
            domain: vec![0.0; w * h],
        }
    }

    fn for_operator(op: &DataOperator, w: usize, h: usize) -> Self {
        let r = match op {
            DataOperator::Blur(k) | DataOperator::DownsampleBlur { blur: k, .. } => k.size() / 2,
            _ => 0,
        };
        let (rw, rh) = op.range_dims(w, h);
        Self {
            resp: Vec::new(),
            pad: vec![0.0; (w + 2 * r) * (h + 2 * r)],
            range: vec![0.0; rw * rh],
            domain: vec![0.0; w * h],
        }
    }
}

/// Analysis energy model: filter bank, penalty, data operator and
/// trade-off weight. Immutable after construction.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    filters: FilterBank,
    kernels: Vec<Kernel>,
    penalty: Penalty,
    k_op: DataOperator,
    lambda: f64,
}

impl EnergyModel {
    pub fn new(filters: FilterBank, penalty: Penalty, k_op: DataOperator, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        k_op.validate()?;
        if k_op.has_nullspace() && lambda == 0.0 {
            return Err(Error::InvalidParameter(
                "lambda must be positive when the data operator has a nullspace".into(),
            ));
        }
        let kernels = filters.assemble();
        Ok(Self { filters, kernels, penalty, k_op, lambda })
    }

    /// The training configuration: `K = I`, `lambda = 1` (the trade-off is
    /// absorbed into the filter weights during learning).
    pub fn training(filters: FilterBank, penalty: Penalty) -> Result<Self> {
        Self::new(filters, penalty, DataOperator::Identity, 1.0)
    }

    pub fn filters(&self) -> &FilterBank {
        &self.filters
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn penalty(&self) -> &Penalty {
        &self.penalty
    }

    pub fn data_operator(&self) -> &DataOperator {
        &self.k_op
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn check_dims(&self, u: &Image, f: &Image) -> Result<()> {
        let k = self.filters.kernel_size();
        if k > u.width() || k > u.height() {
            return Err(Error::DimensionMismatch(format!(
                "filter size {k} larger than image {}x{}",
                u.width(),
                u.height()
            )));
        }
        self.k_op.check_domain(u.width(), u.height())?;
        let (rw, rh) = self.k_op.range_dims(u.width(), u.height());
        if f.width() != rw || f.height() != rh {
            return Err(Error::DimensionMismatch(format!(
                "observation {}x{} does not match operator range {rw}x{rh}",
                f.width(),
                f.height()
            )));
        }
        Ok(())
    }

    /// Energy value plus gradient accumulated into `grad` (overwritten).
    /// Slice-based hot path shared by all public entry points.
    fn energy_grad_into(
        &self,
        u: &[f64],
        f: &[f64],
        w: usize,
        h: usize,
        grad: Option<&mut [f64]>,
        scratch: &mut Scratch,
    ) -> f64 {
        let mut energy = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        for (kern, &alpha) in self.kernels.iter().zip(self.filters.alpha()) {
            if alpha == 0.0 {
                continue;
            }
            conv2_sym_into(u, w, h, kern, &mut scratch.resp);
            let mut acc = 0.0;
            for z in scratch.resp.iter() {
                acc += self.penalty.value(*z);
            }
            energy += alpha * acc;
            if let Some(g) = grad.as_deref_mut() {
                for z in scratch.resp.iter_mut() {
                    *z = self.penalty.d1(*z);
                }
                let r = kern.size() / 2;
                let need = (w + 2 * r) * (h + 2 * r);
                conv2_adjoint_acc(&scratch.resp, w, h, kern, alpha, &mut scratch.pad[..need], g);
            }
        }
        if self.lambda > 0.0 {
            let k_op = &self.k_op;
            // residual = K u - f, formed in the range buffer
            let mut range = std::mem::take(&mut scratch.range);
            k_op.apply_into(u, w, h, &mut range, scratch);
            let mut acc = 0.0;
            for (ri, fi) in range.iter_mut().zip(f) {
                *ri -= fi;
                acc += *ri * *ri;
            }
            energy += 0.5 * self.lambda * acc;
            if let Some(g) = grad.as_deref_mut() {
                k_op.adjoint_acc(&range, w, h, self.lambda, g, scratch);
            }
            scratch.range = range;
        }
        energy
    }

    /// `E(u; f)`.
    pub fn energy(&self, u: &Image, f: &Image) -> Result<f64> {
        self.check_dims(u, f)?;
        let mut scratch = Scratch::new(self, u.width(), u.height());
        let e = self.energy_grad_into(u.data(), f.data(), u.width(), u.height(), None, &mut scratch);
        if e.is_finite() {
            Ok(e)
        } else {
            Err(Error::NonFinite("energy overflowed".into()))
        }
    }

    /// Exact gradient of the energy with respect to the image:
    /// `sum_i alpha_i A_i^T phi'(A_i u) + lambda K^T (K u - f)`, computed
    /// matrix-free with the boundary-exact convolution adjoint.
    pub fn grad_u(&self, u: &Image, f: &Image) -> Result<Image> {
        self.check_dims(u, f)?;
        let mut scratch = Scratch::new(self, u.width(), u.height());
        let mut grad = vec![0.0; u.pixels()];
        self.energy_grad_into(u.data(), f.data(), u.width(), u.height(), Some(&mut grad), &mut scratch);
        Image::new(u.width(), u.height(), grad)
    }

    /// Matrix-free Hessian-vector product
    /// `H v = sum_i alpha_i A_i^T (phi''(A_i u) ⊙ A_i v) + v`, only defined
    /// for the training configuration (`K = I`, `lambda = 1`).
    pub fn hess_vec(&self, u: &Image, v: &Image) -> Result<Image> {
        if !matches!(self.k_op, DataOperator::Identity) || self.lambda != 1.0 {
            return Err(Error::UnsupportedConfiguration(
                "hess_vec requires the training configuration K = I, lambda = 1".into(),
            ));
        }
        if !u.same_size(v) {
            return Err(Error::DimensionMismatch("hess_vec: u and v differ in size".into()));
        }
        self.check_dims(u, u)?;
        let mut op = HessOperator::new(self, u)?;
        Image::new(u.width(), u.height(), op.apply(v.data()))
    }

    /// Minimizes the energy over the image starting from `init`, stopping
    /// when `||grad E||_2 <= gtol` (gray-value scale). Non-convergence is
    /// reported in the diagnostics, not as an error; training treats it as
    /// fatal, restoration accepts it with a warning.
    pub fn solve_lower(&self, f: &Image, init: &Image, opts: &LowerSolveOptions) -> Result<(Image, SolveDiagnostics)> {
        if opts.gtol <= 0.0 {
            return Err(Error::InvalidParameter("lower solver gtol must be positive".into()));
        }
        self.check_dims(init, f)?;
        let (w, h) = (init.width(), init.height());
        let mut scratch = Scratch::new(self, w, h);
        let fdata = f.data();
        let solver_opts = LbfgsOptions {
            memory: 8,
            gtol: opts.gtol,
            ftol_rel: 0.0,
            maxiter: opts.maxiter,
            ..Default::default()
        };
        let res = lbfgs(
            |u: &[f64], g: &mut [f64]| {
                let e = self.energy_grad_into(u, fdata, w, h, Some(g), &mut scratch);
                if e.is_finite() {
                    e
                } else {
                    f64::INFINITY
                }
            },
            init.data(),
            &solver_opts,
        )?;
        let converged = res.grad_norm <= opts.gtol;
        let diag = SolveDiagnostics {
            iterations: res.iterations,
            grad_norm: res.grad_norm,
            energy: res.f,
            energy_trace: res.trace,
            converged,
        };
        Ok((Image::new(w, h, res.x)?, diag))
    }
}

/// Options for the lower-level MAP solve.
#[derive(Debug, Clone)]
pub struct LowerSolveOptions {
    /// Gradient-norm stopping tolerance.
    pub gtol: f64,
    pub maxiter: usize,
}

impl Default for LowerSolveOptions {
    fn default() -> Self {
        Self { gtol: 1e-3, maxiter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub energy: f64,
    /// Energy at every accepted iterate (nonincreasing).
    pub energy_trace: Vec<f64>,
    /// True when the gradient tolerance was reached.
    pub converged: bool,
}

/// Hessian operator of the training energy at a fixed point `u`, with the
/// penalty curvatures `phi''(A_i u)` precomputed once.
pub(crate) struct HessOperator<'a> {
    model: &'a EnergyModel,
    w: usize,
    h: usize,
    d2: Vec<Vec<f64>>,
    resp: Vec<f64>,
    pad: Vec<f64>,
}

impl<'a> HessOperator<'a> {
    pub(crate) fn new(model: &'a EnergyModel, u: &Image) -> Result<Self> {
        if !matches!(model.k_op, DataOperator::Identity) || model.lambda != 1.0 {
            return Err(Error::UnsupportedConfiguration(
                "Hessian operator requires the training configuration K = I, lambda = 1".into(),
            ));
        }
        let (w, h) = (u.width(), u.height());
        let r = model.filters.kernel_size() / 2;
        let mut resp = vec![0.0; w * h];
        let d2 = model
            .kernels
            .iter()
            .map(|kern| {
                conv2_sym_into(u.data(), w, h, kern, &mut resp);
                resp.iter().map(|&z| model.penalty.d2(z)).collect()
            })
            .collect();
        Ok(Self { model, w, h, d2, resp, pad: vec![0.0; (w + 2 * r) * (h + 2 * r)] })
    }

    pub(crate) fn apply(&mut self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for ((kern, &alpha), d2) in self.model.kernels.iter().zip(self.model.filters.alpha()).zip(&self.d2) {
            if alpha == 0.0 {
                continue;
            }
            conv2_sym_into(v, self.w, self.h, kern, &mut self.resp);
            for (r, c) in self.resp.iter_mut().zip(d2) {
                *r *= c;
            }
            let rr = kern.size() / 2;
            let need = (self.w + 2 * rr) * (self.h + 2 * rr);
            conv2_adjoint_acc(&self.resp, self.w, self.h, kern, alpha, &mut self.pad[..need], &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::dct_basis;
    use crate::image::{add_gaussian_noise, reflect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap()
    }

    fn test_bank(k: usize, n: usize, seed: u64, scale: f64) -> FilterBank {
        let basis = dct_basis(k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..basis.len()).map(|_| rng.gen_range(-scale..scale)).collect())
            .collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..1.5)).collect();
        FilterBank::new(basis, beta, alpha).unwrap()
    }

    fn all_penalties() -> [Penalty; 3] {
        [Penalty::smoothed_abs(), Penalty::log_square(), Penalty::log_smoothed_abs()]
    }

    /// Naive reference: explicit symmetric padding, scalar correlation
    /// loops, elementwise penalty sum.
    fn energy_oracle(model: &EnergyModel, u: &Image, f: &Image) -> f64 {
        let (w, h) = (u.width(), u.height());
        let mut e = 0.0;
        for (kern, &alpha) in model.kernels().iter().zip(model.filters().alpha()) {
            let k = kern.size();
            let r = k / 2;
            // explicit padded copy
            let (pw, ph) = (w + 2 * r, h + 2 * r);
            let mut pad = vec![0.0; pw * ph];
            for py in 0..ph {
                for px in 0..pw {
                    let sy = reflect(py as isize - r as isize, h);
                    let sx = reflect(px as isize - r as isize, w);
                    pad[py * pw + px] = u.get(sx, sy);
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut z = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            z += kern.taps()[dy * k + dx] * pad[(y + dy) * pw + (x + dx)];
                        }
                    }
                    e += alpha * model.penalty().value(z);
                }
            }
        }
        let ku = model.data_operator().apply(u).unwrap();
        let res: f64 = ku.data().iter().zip(f.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        e + 0.5 * model.lambda() * res
    }

    #[test]
    fn assemble_identity_rows_returns_atoms() {
        let basis = dct_basis(3).unwrap();
        let nb = basis.len();
        let beta: Vec<Vec<f64>> = (0..nb)
            .map(|i| (0..nb).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let bank = FilterBank::new(basis.clone(), beta, vec![1.0; nb]).unwrap();
        for (kern, atom) in bank.assemble().iter().zip(basis.atoms()) {
            for (a, b) in kern.taps().iter().zip(atom.taps()) {
                assert!((a - b).abs() < 1e-15);
            }
        }

        let zero_bank =
            FilterBank::new(basis.clone(), vec![vec![0.0; nb]], vec![1.0]).unwrap();
        assert!(zero_bank.assemble()[0].taps().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn assemble_matches_direct_summation() {
        let bank = test_bank(5, 3, 9, 0.4);
        let kernels = bank.assemble();
        for (row, kern) in bank.beta().iter().zip(&kernels) {
            let mut expect = vec![0.0; 25];
            for (c, atom) in row.iter().zip(bank.basis().atoms()) {
                for (e, t) in expect.iter_mut().zip(atom.taps()) {
                    *e += c * t;
                }
            }
            for (a, b) in kern.taps().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-13);
            }
            // zero-mean inheritance
            assert!(kern.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn negative_alpha_rejected() {
        let basis = dct_basis(3).unwrap();
        let nb = basis.len();
        assert!(FilterBank::new(basis, vec![vec![0.0; nb]], vec![-0.1]).is_err());
    }

    #[test]
    fn energy_trivial_cases() {
        let basis = dct_basis(3).unwrap();
        let nb = basis.len();
        let bank = FilterBank::new(basis, vec![vec![0.5; nb]; 2], vec![0.0, 0.0]).unwrap();
        let model = EnergyModel::training(bank, Penalty::log_square()).unwrap();
        let f = rng_image(12, 10, 1);
        assert_eq!(model.energy(&f, &f).unwrap(), 0.0);

        let u = rng_image(12, 10, 2);
        let expect: f64 = 0.5
            * u.data()
                .iter()
                .zip(f.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        assert!((model.energy(&u, &f).unwrap() - expect).abs() < 1e-9 * expect);

        // gradient reduces to u - f
        let g = model.grad_u(&u, &f).unwrap();
        for ((gi, ui), fi) in g.data().iter().zip(u.data()).zip(f.data()) {
            assert!((gi - (ui - fi)).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_matches_naive_oracle() {
        for (idx, penalty) in all_penalties().into_iter().enumerate() {
            let bank = test_bank(3, 4, 20 + idx as u64, 0.3);
            let model = EnergyModel::training(bank, penalty).unwrap();
            let u = rng_image(11, 9, 30 + idx as u64);
            let f = rng_image(11, 9, 40 + idx as u64);
            let fast = model.energy(&u, &f).unwrap();
            let slow = energy_oracle(&model, &u, &f);
            assert!(
                (fast - slow).abs() <= 1e-10 * slow.abs().max(1.0),
                "{fast} vs {slow}"
            );
        }
    }

    #[test]
    fn gradient_of_constant_image_is_zero_at_fixed_point() {
        // constant u with zero-mean filters and u = f: phi'(0) = 0 for all
        // penalty kinds, so the gradient vanishes identically.
        for penalty in all_penalties() {
            let bank = test_bank(3, 4, 50, 0.3);
            let model = EnergyModel::training(bank, penalty).unwrap();
            let u = Image::constant(10, 8, 99.0);
            let g = model.grad_u(&u, &u).unwrap();
            for v in g.data() {
                assert!(v.abs() < 1e-10);
            }
        }
    }

    fn fd_gradient(model: &EnergyModel, u: &Image, f: &Image, h_step: f64) -> Vec<f64> {
        let mut g = vec![0.0; u.pixels()];
        let mut up = u.clone();
        for i in 0..u.pixels() {
            let orig = up.data()[i];
            up.data_mut()[i] = orig + h_step;
            let ep = model.energy(&up, f).unwrap();
            up.data_mut()[i] = orig - h_step;
            let em = model.energy(&up, f).unwrap();
            up.data_mut()[i] = orig;
            g[i] = (ep - em) / (2.0 * h_step);
        }
        g
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / nb.max(1e-300)
    }

    #[test]
    fn gradient_matches_finite_differences_all_operators() {
        let mask_data: Vec<f64> = (0..16 * 16).map(|i| ((i * 7 + 1) % 3 != 0) as u8 as f64).collect();
        let ops: Vec<DataOperator> = vec![
            DataOperator::Identity,
            DataOperator::Mask(Image::new(16, 16, mask_data).unwrap()),
            DataOperator::Blur(Kernel::box_blur(3).unwrap()),
            DataOperator::DownsampleBlur { factor: 2, blur: Kernel::box_blur(3).unwrap() },
        ];
        for penalty in all_penalties() {
            for (oi, op) in ops.iter().enumerate() {
                let bank = test_bank(3, 4, 60 + oi as u64, 0.3);
                let model = EnergyModel::new(bank, penalty, op.clone(), 0.8).unwrap();
                let u = rng_image(16, 16, 70 + oi as u64);
                let (rw, rh) = op.range_dims(16, 16);
                let f = rng_image(rw, rh, 80 + oi as u64);
                let g = model.grad_u(&u, &f).unwrap();
                let fd = fd_gradient(&model, &u, &f, 1e-5);
                let err = rel_l2(g.data(), &fd);
                assert!(err <= 1e-6, "op {oi} {:?}: rel err {err}", penalty.kind);
            }
        }
    }

    #[test]
    fn hess_vec_matches_differenced_gradients() {
        for (pi, penalty) in all_penalties().into_iter().enumerate() {
            let bank = test_bank(3, 4, 90 + pi as u64, 0.3);
            let model = EnergyModel::training(bank, penalty).unwrap();
            let u = rng_image(16, 16, 100 + pi as u64);
            let f = rng_image(16, 16, 110 + pi as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(120 + pi as u64);
            let vdata: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = Image::new(16, 16, vdata).unwrap();

            let hv = model.hess_vec(&u, &v).unwrap();

            let hstep = 1e-4;
            let up = Image::new(
                16,
                16,
                u.data().iter().zip(v.data()).map(|(a, b)| a + hstep * b).collect(),
            )
            .unwrap();
            let um = Image::new(
                16,
                16,
                u.data().iter().zip(v.data()).map(|(a, b)| a - hstep * b).collect(),
            )
            .unwrap();
            let gp = model.grad_u(&up, &f).unwrap();
            let gm = model.grad_u(&um, &f).unwrap();
            let fd: Vec<f64> = gp
                .data()
                .iter()
                .zip(gm.data())
                .map(|(a, b)| (a - b) / (2.0 * hstep))
                .collect();
            let err = rel_l2(hv.data(), &fd);
            assert!(err <= 1e-5, "{:?}: rel err {err}", penalty.kind);
        }
    }

    #[test]
    fn hess_vec_symmetry_and_alpha_zero() {
        let basis = dct_basis(3).unwrap();
        let nb = basis.len();
        let zero_bank = FilterBank::new(basis, vec![vec![0.4; nb]; 2], vec![0.0; 2]).unwrap();
        let model0 = EnergyModel::training(zero_bank, Penalty::log_square()).unwrap();
        let u = rng_image(12, 12, 130);
        let v = rng_image(12, 12, 131);
        let hv = model0.hess_vec(&u, &v).unwrap();
        assert_eq!(hv.data(), v.data());

        let bank = test_bank(3, 5, 140, 0.3);
        let model = EnergyModel::training(bank, Penalty::log_square()).unwrap();
        let w = rng_image(12, 12, 132);
        let hv = model.hess_vec(&u, &v).unwrap();
        let hw = model.hess_vec(&u, &w).unwrap();
        let a: f64 = hv.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let b: f64 = v.data().iter().zip(hw.data()).map(|(x, y)| x * y).sum();
        let scale: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt()
            * w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((a - b).abs() <= 1e-12 * scale.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn hess_vec_rejects_non_training_configuration() {
        let bank = test_bank(3, 2, 150, 0.3);
        let model =
            EnergyModel::new(bank, Penalty::log_square(), DataOperator::Blur(Kernel::box_blur(3).unwrap()), 1.0)
                .unwrap();
        let u = rng_image(10, 10, 151);
        assert!(matches!(
            model.hess_vec(&u, &u),
            Err(Error::UnsupportedConfiguration(_))
        ));
    }

    #[test]
    fn illumination_invariance() {
        let bank = test_bank(5, 4, 160, 0.2);
        let model = EnergyModel::training(bank, Penalty::log_square()).unwrap();
        let u = rng_image(14, 14, 161);
        let f = rng_image(14, 14, 162);
        let e0 = model.energy(&u, &f).unwrap();
        for c in [-30.0, 12.5, 100.0] {
            let us = Image::new(14, 14, u.data().iter().map(|v| v + c).collect()).unwrap();
            let fs = Image::new(14, 14, f.data().iter().map(|v| v + c).collect()).unwrap();
            let ec = model.energy(&us, &fs).unwrap();
            assert!((e0 - ec).abs() <= 1e-9 * e0.abs(), "{e0} vs {ec} at c={c}");
        }
    }

    #[test]
    fn data_operator_adjoints_dense_oracle() {
        let (w, h) = (6usize, 5usize);
        let mask_data: Vec<f64> = (0..w * h).map(|i| ((i % 4) != 0) as u8 as f64).collect();
        let ops = vec![
            DataOperator::Identity,
            DataOperator::Mask(Image::new(w, h, mask_data).unwrap()),
            DataOperator::Blur(Kernel::box_blur(3).unwrap()),
            DataOperator::DownsampleBlur { factor: 2, blur: Kernel::box_blur(3).unwrap() },
        ];
        for op in &ops {
            let (rw, rh) = op.range_dims(w, h);
            // dense matrix by applying to unit vectors
            let mut cols = Vec::new();
            for j in 0..w * h {
                let mut e = vec![0.0; w * h];
                e[j] = 1.0;
                cols.push(op.apply(&Image::new(w, h, e).unwrap()).unwrap().into_data());
            }
            // adjoint columns from unit vectors in the range
            for i in 0..rw * rh {
                let mut e = vec![0.0; rw * rh];
                e[i] = 1.0;
                let at = op
                    .apply_adjoint(&Image::new(rw, rh, e).unwrap(), w, h)
                    .unwrap();
                for j in 0..w * h {
                    assert!(
                        (at.data()[j] - cols[j][i]).abs() < 1e-12,
                        "adjoint mismatch at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn nullspace_operator_requires_positive_lambda() {
        let bank = test_bank(3, 2, 170, 0.2);
        let mask = Image::new(8, 8, vec![1.0; 64]).unwrap();
        assert!(EnergyModel::new(
            bank.clone(),
            Penalty::log_square(),
            DataOperator::Mask(mask.clone()),
            0.0
        )
        .is_err());
        assert!(EnergyModel::new(bank, Penalty::log_square(), DataOperator::Mask(mask), 10.0).is_ok());
    }

    #[test]
    fn solve_lower_alpha_zero_returns_observation() {
        let basis = dct_basis(3).unwrap();
        let nb = basis.len();
        let bank = FilterBank::new(basis, vec![vec![0.3; nb]], vec![0.0]).unwrap();
        let model = EnergyModel::training(bank, Penalty::log_square()).unwrap();
        let f = rng_image(12, 12, 180);
        let (u, diag) = model.solve_lower(&f, &f, &LowerSolveOptions::default()).unwrap();
        assert!(diag.converged);
        assert_eq!(diag.iterations, 0);
        assert_eq!(u.data(), f.data());
    }

    #[test]
    fn solve_lower_converges_and_decreases_energy() {
        let bank = test_bank(3, 8, 190, 0.15);
        let model = EnergyModel::training(bank, Penalty::log_square()).unwrap();
        let clean = rng_image(16, 16, 191);
        let f = add_gaussian_noise(&clean, 25.0, 192).unwrap();
        let opts = LowerSolveOptions { gtol: 1e-3, maxiter: 500 };
        let (u, diag) = model.solve_lower(&f, &f, &opts).unwrap();
        assert!(diag.converged, "grad norm {}", diag.grad_norm);
        assert!(diag.grad_norm <= 1e-3);
        assert!(model.energy(&u, &f).unwrap() <= model.energy(&f, &f).unwrap());
        for w in diag.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
