//! Test matrices with prescribed singular spectra.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::qr::random_orthonormal;
use crate::sketch::derive_seed;

/// Singular value profile `σ_1 ≥ σ_2 ≥ …` (1-based index `k`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spectrum {
    /// `σ_k = 1` for `k ≤ rank`, zero afterwards.
    ExactRank { rank: usize },
    /// `σ_k = k^(−exponent)`.
    PowerLaw { exponent: f64 },
    /// `σ_k = exp(−k / scale)`.
    Exponential { scale: f64 },
}

impl Spectrum {
    pub fn values(&self, count: usize) -> Vec<f64> {
        (1..=count)
            .map(|k| match *self {
                Spectrum::ExactRank { rank } => {
                    if k <= rank {
                        1.0
                    } else {
                        0.0
                    }
                }
                Spectrum::PowerLaw { exponent } => (k as f64).powf(-exponent),
                Spectrum::Exponential { scale } => (-(k as f64) / scale).exp(),
            })
            .collect()
    }

    /// Relative Frobenius error of the best rank-`r` approximation of a
    /// matrix with this spectrum truncated to `count` values.
    pub fn optimal_residual(&self, count: usize, r: usize) -> f64 {
        let v = self.values(count);
        let total: f64 = v.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 0.0;
        }
        let tail: f64 = v.iter().skip(r).map(|s| s * s).sum();
        (tail / total).sqrt()
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spectrum::ExactRank { rank } => write!(f, "exact_rank_{rank}"),
            Spectrum::PowerLaw { exponent } => write!(f, "power_law_{exponent}"),
            Spectrum::Exponential { scale } => write!(f, "exponential_{scale}"),
        }
    }
}

/// `U·diag(σ)·Vᵀ` with Haar-random orthonormal `U`, `V`.
pub fn planted_matrix(m: usize, n: usize, spectrum: Spectrum, seed: u64) -> Result<DenseMatrix> {
    let full = m.min(n);
    let count = match spectrum {
        Spectrum::ExactRank { rank } => {
            if rank > full {
                return Err(Error::dim(
                    "planted_matrix",
                    format!("rank <= {full}"),
                    rank,
                ));
            }
            rank
        }
        _ => full,
    };
    let sigma = spectrum.values(count);
    let mut u = random_orthonormal(m, count, derive_seed(seed, 1, 0))?;
    let v = random_orthonormal(n, count, derive_seed(seed, 2, 0))?;
    for i in 0..m {
        u.row_mut(i)
            .iter_mut()
            .zip(&sigma)
            .for_each(|(x, s)| *x *= s);
    }
    u.matmul_t(&v)
}

/// Exact-rank matrix as a product of Gaussian factors (cheap; spectrum not controlled).
pub fn low_rank_gaussian(m: usize, n: usize, rank: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DenseMatrix::random_normal(m, rank, &mut rng);
    let b = DenseMatrix::random_normal(rank, n, &mut rng);
    a.matmul(&b).expect("inner dimensions agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::singular_values;

    #[test]
    fn planted_spectrum_is_realized() {
        let g = planted_matrix(30, 20, Spectrum::PowerLaw { exponent: 2.0 }, 5).unwrap();
        let s = singular_values(&g).unwrap();
        let expected = Spectrum::PowerLaw { exponent: 2.0 }.values(20);
        for (a, b) in s.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let g = planted_matrix(12, 25, Spectrum::ExactRank { rank: 4 }, 1).unwrap();
        let s = singular_values(&g).unwrap();
        assert!(s[3] > 0.999 && s[4] < 1e-12);
    }

    #[test]
    fn optimal_residual_of_diag() {
        // diag(1, 1/4, 1/9): residual of rank-1 is sqrt(1/16 + 1/81) / ‖σ‖
        let sp = Spectrum::PowerLaw { exponent: 2.0 };
        let want = ((1.0f64 / 16.0 + 1.0 / 81.0) / (1.0 + 1.0 / 16.0 + 1.0 / 81.0)).sqrt();
        assert!((sp.optimal_residual(3, 1) - want).abs() < 1e-15);
        assert_eq!(Spectrum::ExactRank { rank: 3 }.optimal_residual(5, 3), 0.0);
    }
}
