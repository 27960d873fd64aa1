//! Zero-mean orthonormal filter basis built from the separable 2-D DCT-II
//! with the constant atom removed. Every learned filter is a linear
//! combination of these atoms, which guarantees zero-mean filters and hence
//! an illumination-invariant prior.

use crate::error::{Error, Result};
use crate::image::Kernel;

/// Ordered set of `k² - 1` zero-mean, pairwise-orthonormal `k x k` atoms.
#[derive(Debug, Clone)]
pub struct BasisSet {
    kernel_size: usize,
    atoms: Vec<Kernel>,
}

impl BasisSet {
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// Number of atoms (`k² - 1`).
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Kernel] {
        &self.atoms
    }

    pub fn atom(&self, j: usize) -> &Kernel {
        &self.atoms[j]
    }
}

/// Builds the modified DCT basis for odd `k >= 3`: the `k²` separable
/// DCT-II atoms with the constant atom dropped, re-orthonormalized with
/// modified Gram-Schmidt to remove rounding drift.
pub fn dct_basis(k: usize) -> Result<BasisSet> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "basis kernel size must be odd and >= 3, got {k}"
        )));
    }
    let scale = |p: usize| -> f64 {
        if p == 0 {
            (1.0 / k as f64).sqrt()
        } else {
            (2.0 / k as f64).sqrt()
        }
    };
    let mut atoms = Vec::with_capacity(k * k - 1);
    for p in 0..k {
        for q in 0..k {
            if p == 0 && q == 0 {
                continue; // constant atom excluded
            }
            let mut taps = Vec::with_capacity(k * k);
            for y in 0..k {
                for x in 0..k {
                    let cy = (std::f64::consts::PI * (2.0 * y as f64 + 1.0) * p as f64
                        / (2.0 * k as f64))
                        .cos();
                    let cx = (std::f64::consts::PI * (2.0 * x as f64 + 1.0) * q as f64
                        / (2.0 * k as f64))
                        .cos();
                    taps.push(scale(p) * scale(q) * cy * cx);
                }
            }
            atoms.push(Kernel::new(k, taps)?);
        }
    }

    // Exact zero-mean, then modified Gram-Schmidt.
    let n_taps = (k * k) as f64;
    for atom in &mut atoms {
        let mean = atom.sum() / n_taps;
        let taps: Vec<f64> = atom.taps().iter().map(|t| t - mean).collect();
        *atom = Kernel::new(k, taps)?;
    }
    for j in 0..atoms.len() {
        for i in 0..j {
            let proj = atoms[j].dot(&atoms[i]);
            let prev = atoms[i].clone();
            atoms[j].add_scaled(-proj, &prev);
        }
        let norm = atoms[j].frob_norm();
        if norm < 1e-8 {
            return Err(Error::InvalidParameter(format!(
                "degenerate basis atom at index {j} for kernel size {k}"
            )));
        }
        atoms[j].scale(1.0 / norm);
    }

    Ok(BasisSet { kernel_size: k, atoms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atom_counts() {
        assert_eq!(dct_basis(3).unwrap().len(), 8);
        assert_eq!(dct_basis(5).unwrap().len(), 24);
        assert_eq!(dct_basis(7).unwrap().len(), 48);
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(dct_basis(1).is_err());
        assert!(dct_basis(2).is_err());
        assert!(dct_basis(4).is_err());
    }

    #[test]
    fn atoms_zero_mean_and_orthonormal() {
        for k in [3usize, 5, 7] {
            let basis = dct_basis(k).unwrap();
            let bound = 1e-12 * (k * k) as f64;
            for (i, a) in basis.atoms().iter().enumerate() {
                assert!(a.sum().abs() <= bound, "k={k} atom {i} sum {}", a.sum());
                for (j, b) in basis.atoms().iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    let got = a.dot(b);
                    assert!((got - want).abs() <= 1e-12, "k={k} <{i},{j}> = {got}");
                }
            }
        }
    }

    #[test]
    fn combinations_stay_zero_mean() {
        let basis = dct_basis(5).unwrap();
        let mut kern = Kernel::new(5, vec![0.0; 25]).unwrap();
        for (j, atom) in basis.atoms().iter().enumerate() {
            kern.add_scaled(0.3 - 0.01 * j as f64, atom);
        }
        assert!(kern.sum().abs() < 1e-12);
    }
}
