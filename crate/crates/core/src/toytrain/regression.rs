//! Planted low-rank least squares: `min_W ‖W·X − Y‖²/(2N)` where
//! `Y = W*·X + U·E` and `W* = U·diag(σ)·Vᵀ` has rank `k`.
//!
//! The noise lives in the column space of `W*`, so every gradient from
//! `W = 0` stays inside a fixed rank-`k` subspace while the optimum loss
//! stays positive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Products;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::qr::random_orthonormal;
use crate::sketch::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    /// Rows of `W` (outputs).
    pub rows: usize,
    /// Columns of `W` (inputs).
    pub cols: usize,
    pub samples: usize,
    pub rank: usize,
    /// Standard deviation of the in-subspace noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 64,
            samples: 128,
            rank: 8,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressionToy {
    config: RegressionConfig,
    w_star: DenseMatrix,
    x: DenseMatrix,
    y: DenseMatrix,
}

impl LinearRegressionToy {
    pub fn new(config: RegressionConfig) -> Result<Self> {
        let RegressionConfig {
            rows,
            cols,
            samples,
            rank,
            noise,
            seed,
        } = config;
        if rank == 0
            || rank > rows.min(cols)
            || samples == 0
            || !(noise >= 0.0 && noise.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "bad regression config {config:?}"
            )));
        }
        let u = random_orthonormal(rows, rank, derive_seed(seed, 1, 0))?;
        let v = random_orthonormal(cols, rank, derive_seed(seed, 2, 0))?;
        // singular values evenly spread over [3, 6]
        let sigma: Vec<f64> = (0..rank)
            .map(|k| 6.0 - 3.0 * k as f64 / (rank.max(2) - 1) as f64)
            .collect();
        let w_star = u.mm(&DenseMatrix::diag(&sigma)).mmt(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
        let x = DenseMatrix::random_normal(cols, samples, &mut rng);
        let mut y = w_star.mm(&x);
        if noise > 0.0 {
            let e = DenseMatrix::random_normal(rank, samples, &mut rng).scaled(noise);
            y.axpy(1.0, &u.mm(&e))?;
        }
        Ok(Self {
            config,
            w_star,
            x,
            y,
        })
    }

    pub fn config(&self) -> &RegressionConfig {
        &self.config
    }

    pub fn planted(&self) -> &DenseMatrix {
        &self.w_star
    }

    fn residual(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        if w.shape() != self.w_star.shape() {
            return Err(Error::dim(
                "LinearRegressionToy",
                format!("{:?}", self.w_star.shape()),
                format!("{:?}", w.shape()),
            ));
        }
        let mut r = w.mm(&self.x);
        r.axpy(-1.0, &self.y)?;
        Ok(r)
    }

    pub fn loss(&self, w: &DenseMatrix) -> Result<f64> {
        let r = self.residual(w)?;
        let n = r.frobenius_norm();
        Ok(n * n / (2.0 * self.config.samples as f64))
    }

    /// Loss and gradient `(W·X − Y)·Xᵀ/N`.
    pub fn loss_and_grad(&self, w: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
        let r = self.residual(w)?;
        let n = r.frobenius_norm();
        let inv = 1.0 / self.config.samples as f64;
        Ok((n * n * inv / 2.0, r.mmt(&self.x).scaled(inv)))
    }
}
