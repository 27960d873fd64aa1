//! Deterministic synthetic grayscale scenes for tests and benchmarks.
//!
//! The generator composes a tilted smooth background, a handful of
//! soft-edged ellipses and rectangles, and a low-amplitude oriented
//! texture. That mix gives piecewise-smooth content with real edges, the
//! statistics a sparsity prior has something to say about, without any
//! external image files.

use opal_core::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Renders a `width x height` scene, fully determined by `seed`.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);

    let base = rng.gen_range(70.0..170.0);
    let tilt_x = rng.gen_range(-50.0..50.0);
    let tilt_y = rng.gen_range(-50.0..50.0);

    struct Blob {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        delta: f64,
        soft: f64,
        rect: bool,
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(3..7))
        .map(|_| Blob {
            cx: rng.gen_range(0.0..w),
            cy: rng.gen_range(0.0..h),
            rx: rng.gen_range(0.08 * w..0.35 * w).max(2.0),
            ry: rng.gen_range(0.08 * h..0.35 * h).max(2.0),
            delta: rng.gen_range(25.0..85.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
            soft: rng.gen_range(0.8..2.5),
            rect: rng.gen::<f64>() < 0.35,
        })
        .collect();

    let tex_amp = rng.gen_range(2.0..7.0);
    let tex_fx = rng.gen_range(0.15..0.9);
    let tex_fy = rng.gen_range(0.15..0.9);

    let mut data = Vec::with_capacity(width * height);
    for yi in 0..height {
        for xi in 0..width {
            let (x, y) = (xi as f64, yi as f64);
            let mut v = base + tilt_x * (x / w - 0.5) + tilt_y * (y / h - 0.5);
            for blob in &blobs {
                // signed distance-ish falloff, sigmoid-soft edge
                let d = if blob.rect {
                    let dx = ((x - blob.cx).abs() - blob.rx) / blob.soft;
                    let dy = ((y - blob.cy).abs() - blob.ry) / blob.soft;
                    dx.max(dy)
                } else {
                    let q = ((x - blob.cx) / blob.rx).powi(2) + ((y - blob.cy) / blob.ry).powi(2);
                    (q.sqrt() - 1.0) * blob.rx.min(blob.ry) / blob.soft
                };
                v += blob.delta / (1.0 + d.exp());
            }
            v += tex_amp * (tex_fx * x).sin() * (tex_fy * y).cos();
            data.push(v.clamp(3.0, 252.0));
        }
    }
    Image::new(width, height, data).expect("synthetic scene is finite")
}

/// A batch of scenes with consecutive seeds starting at `seed`.
pub fn synthetic_scenes(count: usize, width: usize, height: usize, seed: u64) -> Vec<Image> {
    (0..count as u64).map(|i| synthetic_scene(width, height, seed + i)).collect()
}
