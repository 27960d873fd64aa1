//! 8-bit grayscale image IO: portable graymap (P2/P5) and PNG.
//!
//! Loading maps the integer range [0, 255] to reals one-to-one; saving
//! rounds to nearest and clamps to [0, 255]. All optimization happens in
//! double precision, quantization exists only at this boundary.

use crate::error::{Error, Result};
use crate::image::Image;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Rounds to nearest and clamps into the 8-bit range.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Loads a PGM (P2/P5) or 8-bit grayscale PNG, sniffing the magic bytes.
/// Non-grayscale PNG input is rejected unless `convert_to_gray` is set.
pub fn load_image_with_options(path: &Path, convert_to_gray: bool) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        return parse_pgm(&bytes);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return load_png(&bytes, convert_to_gray);
    }
    Err(Error::Format(format!(
        "{}: not a PGM (P2/P5) or PNG file",
        path.display()
    )))
}

/// Strict loader: non-grayscale input is an error.
pub fn load_image(path: &Path) -> Result<Image> {
    load_image_with_options(path, false)
}

/// Saves by extension: `.pgm` writes binary P5, `.png` writes 8-bit
/// grayscale PNG. Values are rounded to nearest and clamped to [0, 255].
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => save_pgm(path, img),
        Some("png") => save_png(path, img),
        other => Err(Error::Format(format!(
            "unsupported output extension {:?} (use .pgm or .png)",
            other
        ))),
    }
}

/// Writes a binary P5 graymap.
pub fn save_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels() + 32);
    write!(out, "P5\n{} {}\n255\n", img.width(), img.height())?;
    out.extend(img.data().iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Writes an ASCII P2 graymap.
pub fn save_pgm_ascii(path: &Path, img: &Image) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("P2\n{} {}\n255\n", img.width(), img.height()));
    for row in img.data().chunks(img.width()) {
        let line: Vec<String> = row.iter().map(|&v| quantize(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let gray = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| Error::Format("png buffer size mismatch".into()))?;
    gray.save(path)
        .map_err(|e| Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}

fn load_png(bytes: &[u8], convert_to_gray: bool) -> Result<Image> {
    let dynimg = image::load_from_memory(bytes)
        .map_err(|e| Error::Format(format!("png read failed: {e}")))?;
    let gray = match dynimg {
        image::DynamicImage::ImageLuma8(g) => g,
        other if convert_to_gray => other.to_luma8(),
        other => {
            return Err(Error::Format(format!(
                "png is not 8-bit grayscale ({:?}); pass the grayscale-conversion flag to convert",
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Image::new(w, h, gray.into_raw().into_iter().map(f64::from).collect())
}

fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let binary = bytes.starts_with(b"P5");
    let mut pos = 2usize;

    // Header tokens may be separated by whitespace and '#' comments.
    let next_token = |pos: &mut usize| -> Result<usize> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated pgm header".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format("malformed pgm header token".into()))
    };

    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "pgm maxval {maxval} unsupported (8-bit only)"
        )));
    }
    let n = width * height;
    let data: Vec<f64> = if binary {
        pos += 1; // single whitespace byte after maxval
        if bytes.len() < pos + n {
            return Err(Error::Format("truncated pgm pixel data".into()));
        }
        bytes[pos..pos + n].iter().map(|&b| f64::from(b)).collect()
    } else {
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(next_token(&mut pos)? as f64);
        }
        data
    };
    if data.iter().any(|&v| v > maxval as f64) {
        return Err(Error::Format("pgm sample exceeds declared maxval".into()));
    }
    Image::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pgm_roundtrip_within_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = Image::new(
            13,
            7,
            (0..13 * 7).map(|_| rng.gen_range(0.0..255.0)).collect(),
        )
        .unwrap();
        save_pgm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.width(), 13);
        assert_eq!(back.height(), 7);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn known_p5_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("known.pgm");
        fs::write(&path, b"P5\n2 2\n255\n\x00\x7f\x80\xff").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 127.0, 128.0, 255.0]);
    }

    #[test]
    fn known_p2_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("known2.pgm");
        fs::write(&path, "P2\n# a comment\n2 2\n255\n0 10\n200 255\n").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 10.0, 200.0, 255.0]);
    }

    #[test]
    fn out_of_range_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clamp.pgm");
        let img = Image::new(2, 1, vec![300.0, -5.0]).unwrap();
        save_pgm(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), &[255.0, 0.0]);
    }

    #[test]
    fn p2_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Image::new(3, 2, vec![0.0, 1.4, 1.6, 254.5, 255.0, 42.0]).unwrap();
        save_pgm_ascii(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 255.0, 255.0, 42.0]);
    }

    #[test]
    fn png_roundtrip_and_gray_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Image::new(5, 4, (0..20).map(|i| i as f64 * 12.0).collect()).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5);
        }

        // RGB png is rejected without the conversion flag
        let rgb_path = dir.path().join("rgb.png");
        let rgb = image::RgbImage::from_fn(4, 4, |x, y| image::Rgb([x as u8, y as u8, 7]));
        rgb.save(&rgb_path).unwrap();
        assert!(load_image(&rgb_path).is_err());
        assert!(load_image_with_options(&rgb_path, true).is_ok());
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"not an image").unwrap();
        assert!(load_image(&path).is_err());
        assert!(load_image(&dir.path().join("missing.pgm")).is_err());
    }
}
