//! Application layer: denoising, inpainting, non-blind deconvolution and
//! single-image super-resolution with a trained filter bank, including the
//! empirical trade-off weight rules for noise levels the model was not
//! trained at.

use crate::energy::{DataOperator, EnergyModel, FilterBank, LowerSolveOptions, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::image::{Image, Kernel};
use crate::penalty::Penalty;

#[derive(Debug, Clone)]
pub enum RestoreKind {
    Denoise { sigma: f64 },
    /// Mask is 1 at observed pixels, 0 at missing ones.
    Inpaint { mask: Image },
    Deblur { kernel: Kernel, sigma: f64 },
    /// Forward model: blur at the high resolution, then decimate.
    SuperRes { factor: usize, blur: Kernel, sigma: f64 },
}

#[derive(Debug, Clone)]
pub struct RestoreTask {
    pub kind: RestoreKind,
    /// Overrides the empirical trade-off weight when set.
    pub lambda: Option<f64>,
    /// Overrides the size-scaled default solver settings when set.
    pub solve: Option<LowerSolveOptions>,
}

impl RestoreTask {
    pub fn new(kind: RestoreKind) -> Self {
        Self { kind, lambda: None, solve: None }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }
}

/// Empirical trade-off weight. Denoising uses `25/sigma` times a
/// multiplier that interpolates piecewise-linearly through the anchors
/// (15, 1.15), (25, 1.0), (50, 0.8) and clamps outside them, so a model
/// trained at sigma = 25 gets exactly lambda = 1. Inpainting of noise-free
/// data uses 1e3; deblurring and super-resolution default to `25/sigma`.
pub fn default_lambda(task: &RestoreTask) -> Result<f64> {
    let sigma_scaled = |sigma: f64, mult: f64| -> Result<f64> {
        if sigma <= 0.0 {
            return Err(Error::InvalidParameter(
                "sigma = 0 has no finite default trade-off weight; pass an explicit lambda".into(),
            ));
        }
        Ok(25.0 / sigma * mult)
    };
    match &task.kind {
        RestoreKind::Denoise { sigma } => {
            let s = *sigma;
            let mult = if s <= 15.0 {
                1.15
            } else if s <= 25.0 {
                1.15 + (1.0 - 1.15) * (s - 15.0) / 10.0
            } else if s <= 50.0 {
                1.0 + (0.8 - 1.0) * (s - 25.0) / 25.0
            } else {
                0.8
            };
            sigma_scaled(s, mult)
        }
        RestoreKind::Inpaint { .. } => Ok(1e3),
        RestoreKind::Deblur { sigma, .. } | RestoreKind::SuperRes { sigma, .. } => {
            sigma_scaled(*sigma, 1.0)
        }
    }
}

/// Replicates every pixel into a `factor x factor` block.
pub fn nearest_upsample(f: &Image, factor: usize) -> Image {
    let (w, h) = (f.width() * factor, f.height() * factor);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = f.get(x / factor, y / factor);
        }
    }
    Image::new(w, h, data).expect("finite by construction")
}

/// Fills unobserved pixels with the mean of the observed ones.
pub fn mean_fill(f: &Image, mask: &Image) -> Result<Image> {
    if !f.same_size(mask) {
        return Err(Error::DimensionMismatch("mask does not match the image".into()));
    }
    let observed: f64 = mask.data().iter().sum();
    if observed == 0.0 {
        return Err(Error::InvalidParameter("mask has no observed pixels".into()));
    }
    let mean = f
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| v * m)
        .sum::<f64>()
        / observed;
    let data = f
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| if *m == 1.0 { *v } else { mean })
        .collect();
    Image::new(f.width(), f.height(), data)
}

#[derive(Debug, Clone)]
pub struct RestoreDiagnostics {
    pub lambda: f64,
    pub solver: SolveDiagnostics,
}

/// Restores `f` under the task's degradation model by MAP inference with
/// the learned prior. The result has the dimensions of the operator domain
/// (the full resolution for super-resolution). Solver non-convergence is
/// reported in the diagnostics rather than as an error.
pub fn restore(
    bank: &FilterBank,
    penalty: Penalty,
    task: &RestoreTask,
    f: &Image,
) -> Result<(Image, RestoreDiagnostics)> {
    let lambda = match task.lambda {
        Some(l) => l,
        None => default_lambda(task)?,
    };

    let (k_op, observed, init) = match &task.kind {
        RestoreKind::Denoise { .. } => (DataOperator::Identity, f.clone(), f.clone()),
        RestoreKind::Inpaint { mask } => {
            if !f.same_size(mask) {
                return Err(Error::DimensionMismatch(format!(
                    "mask {}x{} vs image {}x{}",
                    mask.width(),
                    mask.height(),
                    f.width(),
                    f.height()
                )));
            }
            // zero out unobserved samples so f lies in the operator range
            let masked = Image::new(
                f.width(),
                f.height(),
                f.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect(),
            )?;
            let init = mean_fill(f, mask)?;
            (DataOperator::Mask(mask.clone()), masked, init)
        }
        RestoreKind::Deblur { kernel, .. } => {
            (DataOperator::Blur(kernel.clone()), f.clone(), f.clone())
        }
        RestoreKind::SuperRes { factor, blur, .. } => (
            DataOperator::DownsampleBlur { factor: *factor, blur: blur.clone() },
            f.clone(),
            nearest_upsample(f, *factor),
        ),
    };

    let model = EnergyModel::new(bank.clone(), penalty, k_op, lambda)?;
    let solve_opts = task.solve.clone().unwrap_or_else(|| {
        // gradient-norm tolerances are extensive in the pixel count; scale
        // the training-sized default accordingly
        let scale = (init.pixels() as f64 / 4096.0).sqrt();
        LowerSolveOptions { gtol: 1e-3 * scale.max(1.0), maxiter: 4000 }
    });
    let (u, solver) = model.solve_lower(&observed, &init, &solve_opts)?;
    Ok((u, RestoreDiagnostics { lambda, solver }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::dct_basis;
    use crate::bilevel::{init_filterbank, FilterInit, InitStyle};
    use crate::image::{add_gaussian_noise, psnr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let edge = if x > w as f64 / 2.0 { 60.0 } else { 0.0 };
                110.0 + 40.0 * (fx * x).sin() * (fy * y).cos() + edge
            })
            .collect();
        Image::new(w, h, data).unwrap()
    }

    /// Mild smoothness prior: scaled DCT directions with small weights.
    fn prior_bank() -> FilterBank {
        let init = FilterInit {
            kernel_size: 3,
            count: 8,
            style: InitStyle::Dct,
            norm: 0.1,
            weight: 0.5,
        };
        init_filterbank(&init, 0).unwrap()
    }

    #[test]
    fn lambda_rules() {
        let denoise = |s: f64| RestoreTask::new(RestoreKind::Denoise { sigma: s });
        assert!((default_lambda(&denoise(15.0)).unwrap() - 25.0 / 15.0 * 1.15).abs() < 1e-12);
        assert!((default_lambda(&denoise(25.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((default_lambda(&denoise(50.0)).unwrap() - 0.4).abs() < 1e-12);
        // clamped outside the anchors
        assert!((default_lambda(&denoise(10.0)).unwrap() - 25.0 / 10.0 * 1.15).abs() < 1e-12);
        assert!((default_lambda(&denoise(80.0)).unwrap() - 25.0 / 80.0 * 0.8).abs() < 1e-12);
        assert!(default_lambda(&denoise(0.0)).is_err());

        let mask = Image::new(4, 4, vec![1.0; 16]).unwrap();
        let inpaint = RestoreTask::new(RestoreKind::Inpaint { mask });
        assert_eq!(default_lambda(&inpaint).unwrap(), 1e3);

        let deblur = RestoreTask::new(RestoreKind::Deblur {
            kernel: Kernel::motion_h(5).unwrap(),
            sigma: 2.5,
        });
        assert_eq!(default_lambda(&deblur).unwrap(), 10.0);
    }

    #[test]
    fn denoise_with_zero_weights_is_identity() {
        let basis = dct_basis(3).unwrap();
        let nb = basis.len();
        let bank = crate::energy::FilterBank::new(basis, vec![vec![0.2; nb]], vec![0.0]).unwrap();
        let f = scene(16, 16, 1);
        let task = RestoreTask::new(RestoreKind::Denoise { sigma: 25.0 });
        let (u, diag) = restore(&bank, Penalty::log_square(), &task, &f).unwrap();
        assert!(diag.solver.converged);
        assert_eq!(u.data(), f.data());
    }

    #[test]
    fn all_ones_mask_behaves_like_weak_denoising() {
        let bank = prior_bank();
        let f = scene(24, 24, 2);
        let mask = Image::new(24, 24, vec![1.0; 24 * 24]).unwrap();
        let task = RestoreTask::new(RestoreKind::Inpaint { mask });
        let (u, diag) = restore(&bank, Penalty::log_square(), &task, &f).unwrap();
        assert_eq!(diag.lambda, 1e3);
        // at lambda = 1e3 the data term dominates: near pass-through
        for (a, b) in u.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 0.5, "{a} vs {b}");
        }
    }

    #[test]
    fn inpaint_observed_pixels_stay_close() {
        let g = scene(24, 24, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask_data: Vec<f64> = (0..24 * 24).map(|_| (rng.gen::<f64>() < 0.3) as u8 as f64).collect();
        let mask = Image::new(24, 24, mask_data).unwrap();
        let task = RestoreTask {
            kind: RestoreKind::Inpaint { mask: mask.clone() },
            lambda: None,
            solve: Some(LowerSolveOptions { gtol: 1e-4, maxiter: 20_000 }),
        };
        let (u, _) = restore(&prior_bank(), Penalty::log_square(), &task, &g).unwrap();
        for ((ui, gi), m) in u.data().iter().zip(g.data()).zip(mask.data()) {
            if *m == 1.0 {
                assert!((ui - gi).abs() <= 0.5, "observed pixel moved by {}", ui - gi);
            }
        }
        // and the inpainted result improves on the mean-filled warm start
        let warm = mean_fill(&g, &mask).unwrap();
        assert!(psnr(&u, &g).unwrap() > psnr(&warm, &g).unwrap());
    }

    #[test]
    fn superres_reduces_data_misfit_over_warm_start() {
        let g = scene(36, 36, 5);
        let blur = Kernel::box_blur(3).unwrap();
        let op = DataOperator::DownsampleBlur { factor: 3, blur: blur.clone() };
        let low = op.apply(&g).unwrap();
        let f = add_gaussian_noise(&low, 8.0, 6).unwrap();

        let task = RestoreTask::new(RestoreKind::SuperRes { factor: 3, blur, sigma: 8.0 });
        let (u, _) = restore(&prior_bank(), Penalty::log_square(), &task, &f).unwrap();
        assert_eq!(u.width(), 36);
        assert_eq!(u.height(), 36);

        let warm = nearest_upsample(&f, 3);
        let misfit = |img: &Image| -> f64 {
            let ki = op.apply(img).unwrap();
            ki.data().iter().zip(f.data()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        assert!(misfit(&u) < misfit(&warm));
    }

    #[test]
    fn restore_is_deterministic() {
        let g = scene(20, 20, 7);
        let f = add_gaussian_noise(&g, 25.0, 8).unwrap();
        let task = RestoreTask::new(RestoreKind::Denoise { sigma: 25.0 });
        let bank = prior_bank();
        let (u1, _) = restore(&bank, Penalty::log_square(), &task, &f).unwrap();
        let (u2, _) = restore(&bank, Penalty::log_square(), &task, &f).unwrap();
        assert_eq!(u1.data(), u2.data());
    }
}
