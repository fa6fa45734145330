//! Householder orthonormalization.
//!
//! Columns are consumed left to right. A column whose component outside the
//! span of the already accepted columns is negligible is skipped; if fewer
//! independent columns than requested exist, the factorization continues on
//! seeded Gaussian directions. The returned `Q` therefore always has the
//! requested number of orthonormal columns, and its leading `rank` columns
//! span the accepted input columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm2, DenseMatrix};

/// Relative size below which a column counts as linearly dependent.
pub const DEPENDENCE_TOL: f64 = 1e-12;

const COMPLETION_SEED: u64 = 0x5EED_C0DE_0F0E_u64;

/// Outcome of an orthonormalization.
#[derive(Debug, Clone)]
pub struct QrResult {
    /// Orthonormal columns.
    pub q: DenseMatrix,
    /// Number of input columns accepted as independent.
    pub rank: usize,
    /// Indices of the accepted input columns, in order.
    pub pivots: Vec<usize>,
}

impl QrResult {
    /// True when random completion directions were needed.
    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.q.cols()
    }
}

/// Orthonormalize the columns of `y` (`rows ≥ cols`).
pub fn qr_orthonormalize(y: &DenseMatrix) -> Result<QrResult> {
    if y.rows() < y.cols() {
        return Err(Error::dim(
            "qr_orthonormalize",
            format!("rows >= cols ({})", y.cols()),
            format!("{} rows", y.rows()),
        ));
    }
    orthonormal_range(y, y.cols(), COMPLETION_SEED)
}

/// Orthonormal basis with `target` columns for the range of `y`, built from
/// the first independent columns of `y` and completed with seeded random
/// directions if necessary. `target ≤ rows`; `target` may exceed `cols`.
pub fn orthonormal_range(y: &DenseMatrix, target: usize, completion_seed: u64) -> Result<QrResult> {
    let m = y.rows();
    if target > m {
        return Err(Error::dim(
            "orthonormal_range",
            format!("target <= {m}"),
            target,
        ));
    }
    let cols = y.transpose();
    let scale = (0..cols.rows())
        .map(|j| norm2(cols.row(j)))
        .fold(0.0f64, f64::max);

    let mut h = Reflectors::new(m);
    let mut pivots = Vec::new();
    for j in 0..cols.rows() {
        if h.len() == target {
            break;
        }
        let mut x = cols.row(j).to_vec();
        if h.push_column(&mut x, DEPENDENCE_TOL * scale) {
            pivots.push(j);
        }
    }
    let rank = h.len();

    if h.len() < target {
        let mut rng = ChaCha8Rng::seed_from_u64(completion_seed);
        let mut attempts = 0;
        while h.len() < target {
            attempts += 1;
            if attempts > 4 * target + 16 {
                return Err(Error::Numerical {
                    context: "orthonormal_range",
                    detail: format!("random completion stalled at {} of {target}", h.len()),
                });
            }
            let mut x = DenseMatrix::random_normal(1, m, &mut rng).into_vec();
            let tol = DEPENDENCE_TOL * norm2(&x);
            h.push_column(&mut x, tol);
        }
    }

    Ok(QrResult {
        q: h.form_q(),
        rank,
        pivots,
    })
}

/// Accumulated Householder reflectors `H_k = I − β v vᵀ`, `v` supported on `k..m`.
struct Reflectors {
    m: usize,
    vs: Vec<Vec<f64>>,
    betas: Vec<f64>,
    diag_signs: Vec<f64>,
}

impl Reflectors {
    fn new(m: usize) -> Self {
        Self {
            m,
            vs: Vec::new(),
            betas: Vec::new(),
            diag_signs: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.vs.len()
    }

    fn apply(&self, k: usize, x: &mut [f64]) {
        let v = &self.vs[k];
        let tail = &mut x[k..];
        let s = self.betas[k] * dot(v, tail);
        tail.iter_mut().zip(v).for_each(|(t, vi)| *t -= s * vi);
    }

    /// Reduce `x` by the existing reflectors; if what remains below the
    /// diagonal exceeds `tol`, add a reflector for it and return true.
    fn push_column(&mut self, x: &mut [f64], tol: f64) -> bool {
        let k = self.len();
        for i in 0..k {
            self.apply(i, x);
        }
        let tail = &x[k..];
        let rho = norm2(tail);
        if rho.is_nan() || rho <= tol || rho == 0.0 {
            return false;
        }
        let alpha = if tail[0] >= 0.0 { -rho } else { rho };
        let mut v = tail.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        self.vs.push(v);
        self.betas.push(2.0 / vv);
        // R_kk = alpha; flipping Q's column makes the diagonal of R positive
        self.diag_signs.push(alpha.signum());
        true
    }

    /// Explicit `Q = H_0 ⋯ H_{c−1} [I_c; 0]` with positive `diag(R)`.
    fn form_q(&self) -> DenseMatrix {
        let c = self.len();
        let mut qt = DenseMatrix::zeros(c, self.m);
        for i in 0..c {
            let col = qt.row_mut(i);
            col[i] = 1.0;
            // H_k e_i = e_i for k > i
            for k in (0..=i).rev() {
                self.apply(k, col);
            }
            if self.diag_signs[i] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
        }
        qt.transpose()
    }
}

/// Haar-distributed matrix with orthonormal columns (`rows ≥ cols`).
///
/// Blocked classical Gram–Schmidt with reorthogonalization over Gaussian
/// panels; the panel factorizations use the Householder kernel above, so the
/// result equals the `Q` of a positive-diagonal QR of a Gaussian matrix.
pub fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Result<DenseMatrix> {
    if cols > rows {
        return Err(Error::dim(
            "random_orthonormal",
            format!("cols <= {rows}"),
            cols,
        ));
    }
    const PANEL: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::random_normal(rows, cols, &mut rng);
    let mut q = DenseMatrix::zeros(rows, cols);
    let mut done = 0;
    while done < cols {
        let width = PANEL.min(cols - done);
        let mut panel = x.column_block(done, done + width);
        if done > 0 {
            let prev = q.column_block(0, done);
            for _ in 0..2 {
                let coeffs = prev.t_matmul(&panel)?;
                let along = prev.matmul(&coeffs)?;
                panel = panel.sub(&along)?;
            }
        }
        let block = orthonormal_range(&panel, width, seed ^ done as u64)?.q;
        q.set_column_block(done, &block);
        done += width;
    }
    Ok(q)
}
