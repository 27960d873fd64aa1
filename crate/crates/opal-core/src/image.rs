//! Grayscale image container and the convolution machinery used by the
//! analysis prior: correlation under symmetric boundary extension together
//! with its exact adjoint, plus PSNR, noise injection and patch sampling.
//!
//! Boundary rule: half-sample symmetric extension. The image is mirrored
//! across the array edge so the border pixel appears again in the padding
//! (`[a b c]` padded by two on the left becomes `[b a | a b c]`). The
//! adjoint is derived from exactly this rule by folding padded
//! contributions back onto their source pixels; `conv2_adjoint` is the
//! matrix transpose of `conv2_sym` to machine precision, not merely a
//! mirrored-kernel correlation.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// 2-D grayscale raster of real-valued intensities, row-major.
///
/// Intensities live nominally in `[0, 255]` but are not clamped while
/// optimizing; quantization happens only at the 8-bit IO boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Wraps row-major data. Fails when the length does not match the
    /// dimensions or any value is non-finite.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be nonzero".into()));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image contains NaN or infinite values".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Total pixel count.
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Axis-aligned crop; `(x0, y0)` is the top-left corner.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                width, height, x0, y0, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Image::new(width, height, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.pixels() as f64
    }
}

/// Square odd-sized filter, row-major taps, anchored at its center pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel side length must be odd and positive, got {size}"
            )));
        }
        if taps.len() != size * size {
            return Err(Error::DimensionMismatch(format!(
                "kernel taps length {} != {size}x{size}",
                taps.len()
            )));
        }
        if !taps.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("kernel contains NaN or infinite values".into()));
        }
        Ok(Self { size, taps })
    }

    /// Identity under correlation: 1 at the center, 0 elsewhere.
    pub fn delta(size: usize) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        taps[(size / 2) * size + size / 2] = 1.0;
        Self::new(size, taps)
    }

    /// Normalized box blur (all taps `1/size²`).
    pub fn box_blur(size: usize) -> Result<Self> {
        let v = 1.0 / (size * size) as f64;
        Self::new(size, vec![v; size * size])
    }

    /// Normalized truncated Gaussian blur.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::InvalidParameter("gaussian sigma must be positive".into()));
        }
        let r = (size / 2) as isize;
        let mut taps = Vec::with_capacity(size * size);
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as f64;
                taps.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Self::new(size, taps)
    }

    /// Horizontal motion blur: a centered row of `len` equal taps inside an
    /// odd `len x len` kernel (`len` is rounded up to odd).
    pub fn motion_h(len: usize) -> Result<Self> {
        let size = if len % 2 == 0 { len + 1 } else { len };
        let mut taps = vec![0.0; size * size];
        let row = size / 2;
        let start = (size - len) / 2;
        for x in start..start + len {
            taps[row * size + x] = 1.0 / len as f64;
        }
        Self::new(size, taps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    /// Frobenius inner product with another kernel of the same size.
    pub fn dot(&self, other: &Kernel) -> f64 {
        debug_assert_eq!(self.size, other.size);
        self.taps.iter().zip(&other.taps).map(|(a, b)| a * b).sum()
    }

    /// `self + c * other`, elementwise.
    pub fn add_scaled(&mut self, c: f64, other: &Kernel) {
        debug_assert_eq!(self.size, other.size);
        for (t, o) in self.taps.iter_mut().zip(&other.taps) {
            *t += c * o;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.taps.iter_mut().for_each(|t| *t *= c);
    }
}

/// Half-sample symmetric index map: valid for `-(n) <= i <= 2n - 1`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(i >= -n && i < 2 * n);
    (if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    }) as usize
}

fn check_conv_dims(w: usize, h: usize, kern: &Kernel) -> Result<()> {
    if kern.size > w || kern.size > h {
        return Err(Error::DimensionMismatch(format!(
            "kernel {}x{} larger than image {}x{}",
            kern.size, kern.size, w, h
        )));
    }
    Ok(())
}

/// Correlation of `kern` with symmetric padding of `src`; `dst` is overwritten.
pub(crate) fn conv2_sym_into(src: &[f64], w: usize, h: usize, kern: &Kernel, dst: &mut [f64]) {
    let k = kern.size;
    let r = k / 2;
    let taps = &kern.taps;
    debug_assert_eq!(src.len(), w * h);
    debug_assert_eq!(dst.len(), w * h);
    for y in 0..h {
        let y_in = y >= r && y + r < h;
        for x in 0..w {
            let mut acc = 0.0;
            if y_in && x >= r && x + r < w {
                let mut row = (y - r) * w + (x - r);
                let mut t = 0;
                for _ in 0..k {
                    for dx in 0..k {
                        acc += taps[t + dx] * src[row + dx];
                    }
                    row += w;
                    t += k;
                }
            } else {
                for dy in 0..k {
                    let sy = reflect(y as isize + dy as isize - r as isize, h);
                    let t = dy * k;
                    for dx in 0..k {
                        let sx = reflect(x as isize + dx as isize - r as isize, w);
                        acc += taps[t + dx] * src[sy * w + sx];
                    }
                }
            }
            dst[y * w + x] = acc;
        }
    }
}

/// `dst += scale * A^T src` where `A` is the linear map of [`conv2_sym_into`].
///
/// Works in two stages: scatter `src` through the correlation taps onto the
/// padded grid (the transpose of valid correlation), then fold every padded
/// cell back onto the interior pixel it mirrors (the transpose of padding).
/// `pad` is caller-provided scratch of size `(w + 2r) * (h + 2r)`.
pub(crate) fn conv2_adjoint_acc(
    src: &[f64],
    w: usize,
    h: usize,
    kern: &Kernel,
    scale: f64,
    pad: &mut [f64],
    dst: &mut [f64],
) {
    let k = kern.size;
    let r = k / 2;
    let pw = w + 2 * r;
    let taps = &kern.taps;
    debug_assert_eq!(src.len(), w * h);
    debug_assert_eq!(dst.len(), w * h);
    debug_assert_eq!(pad.len(), pw * (h + 2 * r));
    pad.fill(0.0);
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            let mut prow = y * pw + x;
            let mut t = 0;
            for _ in 0..k {
                for dx in 0..k {
                    pad[prow + dx] += taps[t + dx] * v;
                }
                prow += pw;
                t += k;
            }
        }
    }
    for py in 0..h + 2 * r {
        let sy = reflect(py as isize - r as isize, h);
        for px in 0..pw {
            let sx = reflect(px as isize - r as isize, w);
            dst[sy * w + sx] += scale * pad[py * pw + px];
        }
    }
}

/// Filter response `A u`: correlation (the kernel is not flipped) of `a`
/// with `u` under half-sample symmetric boundary extension. The output has
/// the same size as `u`.
pub fn conv2_sym(u: &Image, a: &Kernel) -> Result<Image> {
    check_conv_dims(u.width, u.height, a)?;
    let mut out = vec![0.0; u.pixels()];
    conv2_sym_into(&u.data, u.width, u.height, a, &mut out);
    Image::new(u.width, u.height, out)
}

/// Exact transpose of [`conv2_sym`] with the same kernel:
/// `<conv2_sym(u, a), v> == <u, conv2_adjoint(v, a)>` to machine precision.
pub fn conv2_adjoint(v: &Image, a: &Kernel) -> Result<Image> {
    check_conv_dims(v.width, v.height, a)?;
    let r = a.size / 2;
    let mut pad = vec![0.0; (v.width + 2 * r) * (v.height + 2 * r)];
    let mut out = vec![0.0; v.pixels()];
    conv2_adjoint_acc(&v.data, v.width, v.height, a, 1.0, &mut pad, &mut out);
    Image::new(v.width, v.height, out)
}

/// Peak signal-to-noise ratio in dB against peak 255. Returns
/// `f64::INFINITY` when the images are identical.
pub fn psnr(u: &Image, g: &Image) -> Result<f64> {
    if !u.same_size(g) {
        return Err(Error::DimensionMismatch(format!(
            "psnr: {}x{} vs {}x{}",
            u.width, u.height, g.width, g.height
        )));
    }
    let mse = u
        .data
        .iter()
        .zip(&g.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / u.pixels() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (255.0 / mse.sqrt()).log10())
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`.
/// Deterministic under `seed`; the result is not clamped to `[0, 255]`.
pub fn add_gaussian_noise(u: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if sigma < 0.0 {
        return Err(Error::InvalidParameter("noise sigma must be nonnegative".into()));
    }
    if sigma == 0.0 {
        return Ok(u.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidParameter(format!("invalid noise distribution: {e}")))?;
    let data = u.data.iter().map(|v| v + normal.sample(&mut rng)).collect();
    Image::new(u.width, u.height, data)
}

/// Draws `count` uniformly random `patch x patch` crops, cycling through the
/// images in order (crop `i` comes from image `i % images.len()`).
pub fn sample_patches(
    images: &[Image],
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    if images.is_empty() {
        return Err(Error::InvalidParameter("no images to sample from".into()));
    }
    if patch == 0 {
        return Err(Error::InvalidParameter("patch size must be positive".into()));
    }
    for img in images {
        if img.width < patch || img.height < patch {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} smaller than patch {}",
                img.width, img.height, patch
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let img = &images[i % images.len()];
        let x0 = Uniform::new_inclusive(0, img.width - patch).sample(&mut rng);
        let y0 = Uniform::new_inclusive(0, img.height - patch).sample(&mut rng);
        out.push(img.crop(x0, y0, patch, patch)?);
    }
    Ok(out)
}
