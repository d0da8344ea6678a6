//! Zero-mean DCT filter basis and unit-norm filter materialization.

use crate::error::{Result, TnrdError};
use crate::image::Kernel;

/// Coefficient norms below this are rejected by [`materialize`].
pub const DEGENERATE_NORM: f64 = 1e-12;

pub const MIN_KERNEL_SIZE: usize = 3;
pub const MAX_KERNEL_SIZE: usize = 15;

/// The `m² − 1` separable DCT-II atoms of an `m × m` kernel, constant atom removed.
///
/// Atoms are ordered by zig-zag frequency: anti-diagonals of increasing total
/// frequency, alternating direction as in the JPEG scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    size: usize,
    atoms: Vec<Vec<f64>>,
    /// (vertical, horizontal) frequency of each atom.
    frequencies: Vec<(usize, usize)>,
}

/// Orthonormal 1D DCT-II vectors of length `n`: `v_k[j] = α_k cos(π (2j+1) k / 2n)`.
pub fn dct_ii_vectors(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let alpha = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|j| {
                    alpha
                        * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64)
                            .cos()
                })
                .collect()
        })
        .collect()
}

/// Zig-zag ordering of `(row, col)` frequency pairs in an `n × n` grid.
pub fn zigzag_order(n: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(n * n);
    for s in 0..(2 * n - 1) {
        let lo = s.saturating_sub(n - 1);
        let hi = s.min(n - 1);
        if s % 2 == 0 {
            for r in (lo..=hi).rev() {
                order.push((r, s - r));
            }
        } else {
            for r in lo..=hi {
                order.push((r, s - r));
            }
        }
    }
    order
}

impl DctBasis {
    pub fn new(size: usize) -> Result<Self> {
        if size % 2 == 0 || !(MIN_KERNEL_SIZE..=MAX_KERNEL_SIZE).contains(&size) {
            return Err(TnrdError::invalid(format!(
                "DCT basis size must be odd in [{MIN_KERNEL_SIZE}, {MAX_KERNEL_SIZE}], got {size}"
            )));
        }
        let v = dct_ii_vectors(size);
        let frequencies: Vec<(usize, usize)> =
            zigzag_order(size).into_iter().filter(|&f| f != (0, 0)).collect();
        let atoms = frequencies
            .iter()
            .map(|&(fy, fx)| {
                let mut taps = Vec::with_capacity(size * size);
                for y in 0..size {
                    for x in 0..size {
                        taps.push(v[fy][y] * v[fx][x]);
                    }
                }
                taps
            })
            .collect();
        Ok(DctBasis {
            size,
            atoms,
            frequencies,
        })
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.size
    }

    /// Number of atoms, `m² − 1`.
    #[inline]
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    #[inline]
    pub fn atom(&self, r: usize) -> &[f64] {
        &self.atoms[r]
    }

    pub fn atom_kernel(&self, r: usize) -> Kernel {
        Kernel::new(self.size, self.atoms[r].clone()).expect("atom has odd size")
    }

    pub fn frequencies(&self) -> &[(usize, usize)] {
        &self.frequencies
    }

    /// `B ω` (unnormalized combination).
    pub fn combine(&self, omega: &[f64]) -> Vec<f64> {
        let mut taps = vec![0.0; self.size * self.size];
        for (atom, &c) in self.atoms.iter().zip(omega) {
            if c != 0.0 {
                for (t, a) in taps.iter_mut().zip(atom) {
                    *t += c * a;
                }
            }
        }
        taps
    }

    /// `Bᵀ k`: projections of a kernel onto every atom.
    pub fn project(&self, taps: &[f64]) -> Vec<f64> {
        self.atoms
            .iter()
            .map(|atom| atom.iter().zip(taps).map(|(a, t)| a * t).sum())
            .collect()
    }
}

/// Filter coefficients over a [`DctBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterAtom {
    pub omega: Vec<f64>,
}

impl FilterAtom {
    pub fn new(omega: Vec<f64>) -> Self {
        FilterAtom { omega }
    }

    /// Coefficients selecting a single basis atom.
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut omega = vec![0.0; len];
        omega[index] = 1.0;
        FilterAtom { omega }
    }

    pub fn norm(&self) -> f64 {
        self.omega.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn checked_norm(omega: &FilterAtom, basis: &DctBasis) -> Result<f64> {
    if omega.omega.len() != basis.len() {
        return Err(TnrdError::dims(format!(
            "filter has {} coefficients but basis has {} atoms",
            omega.omega.len(),
            basis.len()
        )));
    }
    let n = omega.norm();
    if !(n >= DEGENERATE_NORM) {
        return Err(TnrdError::DegenerateFilter {
            norm: n,
            threshold: DEGENERATE_NORM,
        });
    }
    Ok(n)
}

/// Unit-norm, zero-mean kernel `k = B ω / ‖ω‖`.
pub fn materialize(omega: &FilterAtom, basis: &DctBasis) -> Result<Kernel> {
    let n = checked_norm(omega, basis)?;
    let mut taps = basis.combine(&omega.omega);
    taps.iter_mut().for_each(|t| *t /= n);
    Kernel::new(basis.kernel_size(), taps)
}

/// Pulls a kernel gradient back to the coefficients:
/// `dω = (Bᵀ dk − ⟨k, dk⟩ ω / n) / n` with `n = ‖ω‖`, `k = B ω / n`.
pub fn materialize_jacobian_apply(
    omega: &FilterAtom,
    basis: &DctBasis,
    dk: &Kernel,
) -> Result<Vec<f64>> {
    let n = checked_norm(omega, basis)?;
    if dk.size() != basis.kernel_size() {
        return Err(TnrdError::dims(format!(
            "kernel gradient is {}x{} but basis is {}x{}",
            dk.size(),
            dk.size(),
            basis.kernel_size(),
            basis.kernel_size()
        )));
    }
    let projected = basis.project(dk.taps());
    // ⟨k, dk⟩ = ⟨Bω, dk⟩ / n = ⟨ω, Bᵀdk⟩ / n for an orthonormal basis.
    let k_dot: f64 = omega
        .omega
        .iter()
        .zip(&projected)
        .map(|(w, p)| w * p)
        .sum::<f64>()
        / n;
    Ok(projected
        .iter()
        .zip(&omega.omega)
        .map(|(p, w)| (p - k_dot * w / n) / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(DctBasis::new(3).unwrap().len(), 8);
        assert_eq!(DctBasis::new(5).unwrap().len(), 24);
        assert_eq!(DctBasis::new(7).unwrap().len(), 48);
        assert_eq!(DctBasis::new(9).unwrap().len(), 80);
        for bad in [1, 2, 4, 17] {
            assert!(matches!(DctBasis::new(bad), Err(TnrdError::InvalidArgument(_))));
        }
    }

    #[test]
    fn atoms_are_orthonormal_and_zero_mean() {
        for m in [3, 5, 7, 9, 15] {
            let b = DctBasis::new(m).unwrap();
            for r in 0..b.len() {
                assert!((dot(b.atom(r), b.atom(r)) - 1.0).abs() < 1e-12);
                assert!(b.atom(r).iter().sum::<f64>().abs() < 1e-12);
                for s in r + 1..b.len() {
                    assert!(dot(b.atom(r), b.atom(s)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zigzag_starts_like_jpeg() {
        let z = zigzag_order(8);
        assert_eq!(&z[..6], &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        assert_eq!(z.len(), 64);
        assert_eq!(z[63], (7, 7));
    }

    #[test]
    fn one_hot_materializes_to_atom() {
        let b = DctBasis::new(5).unwrap();
        for r in [0, 7, 23] {
            let k = materialize(&FilterAtom::one_hot(b.len(), r), &b).unwrap();
            assert_eq!(k.taps(), b.atom(r));
        }
    }

    #[test]
    fn materialize_is_scale_invariant_unit_norm_zero_mean() {
        let b = DctBasis::new(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let w = FilterAtom::new((0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            let k = materialize(&w, &b).unwrap();
            assert!((k.norm() - 1.0).abs() < 1e-12);
            assert!(k.sum().abs() < 1e-12);
            let scaled = FilterAtom::new(w.omega.iter().map(|v| 3.0 * v).collect());
            let k3 = materialize(&scaled, &b).unwrap();
            for (a, c) in k.taps().iter().zip(k3.taps()) {
                assert!((a - c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degenerate_coefficients_are_rejected() {
        let b = DctBasis::new(3).unwrap();
        let err = materialize(&FilterAtom::new(vec![0.0; 8]), &b).unwrap_err();
        assert!(matches!(err, TnrdError::DegenerateFilter { .. }));
        let tiny = FilterAtom::new(vec![1e-14; 8]);
        assert!(materialize(&tiny, &b).is_err());
        assert!(materialize(&FilterAtom::new(vec![1.0; 7]), &b).is_err());
    }

    #[test]
    fn zero_mean_kernels_are_reconstructed_from_projections() {
        let b = DctBasis::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut taps: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = taps.iter().sum::<f64>() / 25.0;
        taps.iter_mut().for_each(|t| *t -= mean);
        let rebuilt = b.combine(&b.project(&taps));
        for (a, c) in taps.iter().zip(&rebuilt) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn jacobian_apply_for_one_hot_and_orthogonal_direction() {
        let b = DctBasis::new(3).unwrap();
        let w = FilterAtom::one_hot(8, 2);
        // dk = atom 5 is orthogonal to k = atom 2.
        let dk = b.atom_kernel(5);
        let g = materialize_jacobian_apply(&w, &b, &dk).unwrap();
        for (r, v) in g.iter().enumerate() {
            let expected = if r == 5 { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
        // dk = k has no component that survives normalization.
        let k = materialize(&w, &b).unwrap();
        let g = materialize_jacobian_apply(&w, &b, &k).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobian_apply_matches_finite_differences() {
        let b = DctBasis::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..10 {
            let w: Vec<f64> = (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dw: Vec<f64> = (0..b.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dk = Kernel::new(5, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let grad = materialize_jacobian_apply(&FilterAtom::new(w.clone()), &b, &dk).unwrap();
            let shifted = |s: f64| {
                let v: Vec<f64> = w.iter().zip(&dw).map(|(a, d)| a + s * d).collect();
                dot(materialize(&FilterAtom::new(v), &b).unwrap().taps(), dk.taps())
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an = dot(&grad, &dw);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
            // Scale invariance: the gradient is orthogonal to ω.
            assert!(dot(&grad, &w).abs() < 1e-10);
        }
    }
}
