use opal_core::basis::dct_basis;
use opal_core::energy::{EnergyModel, FilterBank, LowerSolveOptions};
use opal_core::image::{add_gaussian_noise, Image};
use opal_core::penalty::Penalty;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy) = (rng.gen_range(0.02..0.2), rng.gen_range(0.02..0.2));
    let (a, b) = (rng.gen_range(60.0..160.0), rng.gen_range(20.0..60.0));
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            a + b * (fx * x + fy * y).sin() + 20.0 * ((x / w as f64) - 0.5)
        })
        .collect();
    Image::new(w, h, data).unwrap()
}

fn perturbed_bank(k: usize, n: usize, seed: u64, scale: f64) -> FilterBank {
    let basis = dct_basis(k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = (0..n)
        .map(|_| (0..basis.len()).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect();
    let alpha = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    FilterBank::new(basis, beta, alpha).unwrap()
}

fn main() {
    let g = smooth_image(16, 16, 40);
    let f = add_gaussian_noise(&g, 25.0, 140).unwrap();
    for scale in [0.05, 0.15, 0.3] {
        let bank = perturbed_bank(3, 4, 22, scale);
        let model = EnergyModel::training(bank, Penalty::log_square()).unwrap();
        let t0 = std::time::Instant::now();
        let (u, diag) = model
            .solve_lower(&f, &f, &LowerSolveOptions { gtol: 1e-3, maxiter: 20000 })
            .unwrap();
        println!(
            "scale {scale}: converged={} iters={} gnorm={:.3e} energy={:.6} time={:?}",
            diag.converged, diag.iterations, diag.grad_norm, diag.energy, t0.elapsed()
        );
        let _ = u;
        let n = diag.energy_trace.len();
        let tail: Vec<String> = diag.energy_trace[n.saturating_sub(6)..]
            .iter().map(|v| format!("{v:.9}")).collect();
        println!("  trace tail: {}", tail.join(" "));
    }
}
