//! Projection bases and subspace quality measures.
//!
//! A [`ProjectionBasis`] holds an orthonormal-column matrix `P` together with
//! the side of the gradient it acts on. For a gradient `G` of shape `m×n`:
//!
//! * `Left`:  `P` is `m×r`, the compressed gradient is `PᵀG` (`r×n`).
//! * `Right`: `P` is `n×r`, the compressed gradient is `GP` (`m×r`).
//!
//! Bases come from the exact truncated SVD (the GaLore baseline), from the
//! SRFT sketch followed by Householder QR, or from a Gaussian sketch.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::matrix::DenseMatrix;
use crate::qr::{self, QrResult};
use crate::sketch::{build_srft, sketch_gaussian, Mixing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Project the smaller dimension: `Left` when `m ≤ n`.
    pub fn for_shape(m: usize, n: usize) -> Side {
        if m <= n {
            Side::Left
        } else {
            Side::Right
        }
    }

    /// Dimension the basis lives in for an `m×n` gradient.
    pub fn ambient_dim(self, m: usize, n: usize) -> usize {
        match self {
            Side::Left => m,
            Side::Right => n,
        }
    }

    /// Dimension that the sketch mixes over for an `m×n` gradient.
    pub fn mixed_dim(self, m: usize, n: usize) -> usize {
        match self {
            Side::Left => n,
            Side::Right => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMethod {
    ExactSvd,
    Srft,
    Gaussian,
}

impl fmt::Display for BasisMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisMethod::ExactSvd => "svd",
            BasisMethod::Srft => "srft",
            BasisMethod::Gaussian => "gaussian",
        })
    }
}

/// Orthonormal basis `P_t` of an estimated dominant gradient subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBasis {
    basis: DenseMatrix,
    side: Side,
    birth_step: u64,
    method: BasisMethod,
    rank_deficient: bool,
}

impl ProjectionBasis {
    /// Wrap an explicit basis, checking orthonormality.
    pub fn from_matrix(basis: DenseMatrix, side: Side, method: BasisMethod) -> Result<Self> {
        let defect = basis.orthonormality_defect();
        if defect.is_nan() || defect > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self {
            basis,
            side,
            birth_step: 0,
            method,
            rank_deficient: false,
        })
    }

    pub(crate) fn from_parts(
        basis: DenseMatrix,
        side: Side,
        method: BasisMethod,
        rank_deficient: bool,
    ) -> Self {
        Self {
            basis,
            side,
            birth_step: 0,
            method,
            rank_deficient,
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn birth_step(&self) -> u64 {
        self.birth_step
    }

    pub fn with_birth_step(mut self, step: u64) -> Self {
        self.birth_step = step;
        self
    }

    pub fn method(&self) -> BasisMethod {
        self.method
    }

    /// Set when the sketch had fewer than `rank` independent directions and
    /// the basis was completed with random ones.
    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    fn check_gradient(&self, g: &DenseMatrix, context: &'static str) -> Result<()> {
        let ambient = self.side.ambient_dim(g.rows(), g.cols());
        if ambient != self.ambient_dim() {
            return Err(Error::dim(
                context,
                format!("{:?}-side dimension {}", self.side, self.ambient_dim()),
                format!("{}x{} gradient", g.rows(), g.cols()),
            ));
        }
        Ok(())
    }

    /// Compress: `PᵀG` (Left) or `GP` (Right).
    pub fn project(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_gradient(g, "project")?;
        match self.side {
            Side::Left => self.basis.t_matmul(g),
            Side::Right => g.matmul(&self.basis),
        }
    }

    /// Decompress a projected matrix back to full shape: `P·R` or `R·Pᵀ`.
    pub fn project_back(&self, r: &DenseMatrix) -> Result<DenseMatrix> {
        match self.side {
            Side::Left => self.basis.matmul(r),
            Side::Right => r.matmul_t(&self.basis),
        }
    }

    /// Shape of the compressed gradient for an `m×n` gradient.
    pub fn projected_shape(&self, m: usize, n: usize) -> (usize, usize) {
        match self.side {
            Side::Left => (self.rank(), n),
            Side::Right => (m, self.rank()),
        }
    }
}

fn oriented(g: &DenseMatrix, side: Side) -> std::borrow::Cow<'_, DenseMatrix> {
    match side {
        Side::Left => std::borrow::Cow::Borrowed(g),
        Side::Right => std::borrow::Cow::Owned(g.transpose()),
    }
}

fn check_rank(g: &DenseMatrix, r: usize, context: &'static str) -> Result<()> {
    let max = g.rows().min(g.cols());
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if r > max {
        return Err(Error::dim(context, format!("rank <= {max}"), r));
    }
    Ok(())
}

/// Thin SVD pieces of a matrix, singular values descending.
pub struct Svd {
    pub singular_values: Vec<f64>,
    /// Left singular vectors as columns (`m×k`), if requested.
    pub u: Option<DenseMatrix>,
    /// Right singular vectors as columns (`n×k`), if requested.
    pub v: Option<DenseMatrix>,
}

/// Dense SVD (Golub–Kahan bidiagonalization with implicit-shift QR).
pub fn svd(g: &DenseMatrix, want_u: bool, want_v: bool) -> Result<Svd> {
    g.ensure_finite("svd input")?;
    let (m, n) = g.shape();
    if m == 0 || n == 0 {
        return Ok(Svd {
            singular_values: Vec::new(),
            u: want_u.then(|| DenseMatrix::zeros(m, 0)),
            v: want_v.then(|| DenseMatrix::zeros(n, 0)),
        });
    }
    let a = DMatrix::from_row_slice(m, n, g.as_slice());
    let max_iter = 200 * m.max(n);
    let dec = a
        .try_svd(want_u, want_v, f64::EPSILON, max_iter)
        .ok_or_else(|| Error::Numerical {
            context: "svd",
            detail: format!(
                "no convergence within {max_iter} sweeps on a {m}x{n} matrix with Frobenius norm {:.6e}",
                g.frobenius_norm()
            ),
        })?;
    let k = dec.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));
    let singular_values = order.iter().map(|&i| dec.singular_values[i]).collect();
    let u = dec
        .u
        .map(|u| DenseMatrix::from_fn(m, k, |i, j| u[(i, order[j])]));
    let v = dec
        .v_t
        .map(|vt| DenseMatrix::from_fn(n, k, |i, j| vt[(order[j], i)]));
    Ok(Svd {
        singular_values,
        u,
        v,
    })
}

/// Singular values of `g`, descending.
pub fn singular_values(g: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(svd(g, false, false)?.singular_values)
}

/// Flip each column so that its largest-magnitude entry is positive.
fn fix_column_signs(p: &mut DenseMatrix) {
    for j in 0..p.cols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..p.rows() {
            let v = p.get(i, j);
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..p.rows() {
                let v = p.get(i, j);
                p.set(i, j, -v);
            }
        }
    }
}

/// Top-`r` singular vectors of `g` on the given side (exact baseline).
pub fn svd_basis(g: &DenseMatrix, r: usize, side: Side) -> Result<ProjectionBasis> {
    check_rank(g, r, "svd_basis")?;
    let dec = match side {
        Side::Left => svd(g, true, false)?.u,
        Side::Right => svd(g, false, true)?.v,
    }
    .expect("requested factor is present");
    let mut p = dec.column_block(0, r);
    fix_column_signs(&mut p);
    Ok(ProjectionBasis::from_parts(
        p,
        side,
        BasisMethod::ExactSvd,
        false,
    ))
}

/// How a sketch with `ℓ ≥ r` columns is cut down to `r` basis vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Leading `r` columns of the Householder `Q` of the sketch. Oversampled
    /// columns only matter when the leading ones are dependent.
    Leading,
    /// Top-`r` left singular vectors of the sketch, obtained from the SVD of
    /// its `ℓ×ℓ` triangular factor (`O(m·ℓ²)`).
    #[default]
    Dominant,
}

/// Options for the randomized range finders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SketchOptions {
    pub oversample: usize,
    pub mixing: Mixing,
    pub truncation: Truncation,
    pub policy: ExecPolicy,
}

impl Default for SketchOptions {
    fn default() -> Self {
        Self {
            oversample: 0,
            mixing: Mixing::UnitaryDct,
            truncation: Truncation::Dominant,
            policy: ExecPolicy::default(),
        }
    }
}

impl SketchOptions {
    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }

    pub fn with_mixing(mut self, mixing: Mixing) -> Self {
        self.mixing = mixing;
        self
    }

    pub fn with_truncation(mut self, truncation: Truncation) -> Self {
        self.truncation = truncation;
        self
    }

    pub fn with_policy(mut self, policy: ExecPolicy) -> Self {
        self.policy = policy;
        self
    }
}

/// SRFT range finder: `Y = G·Ωᵀ`, `Q = qr(Y)`, then `r` columns chosen per
/// [`Truncation`].
pub fn srft_basis(
    g: &DenseMatrix,
    r: usize,
    side: Side,
    opts: SketchOptions,
    seed: u64,
) -> Result<ProjectionBasis> {
    check_rank(g, r, "srft_basis")?;
    g.ensure_finite("srft_basis input")?;
    let target = oriented(g, side);
    // oversampling cannot exceed the dimension being mixed
    let sketch_dim = (r + opts.oversample).min(target.cols());
    let op = build_srft(target.cols(), sketch_dim, opts.mixing, seed)?;
    let y = op.sketch_columns_with(&target, opts.policy)?;
    let (p, deficient) = basis_from_sketch(&y, r, opts.truncation, seed)?;
    Ok(ProjectionBasis::from_parts(
        p,
        side,
        BasisMethod::Srft,
        deficient,
    ))
}

/// Gaussian range finder with the same structure as [`srft_basis`].
pub fn gaussian_basis(
    g: &DenseMatrix,
    r: usize,
    side: Side,
    opts: SketchOptions,
    seed: u64,
) -> Result<ProjectionBasis> {
    check_rank(g, r, "gaussian_basis")?;
    g.ensure_finite("gaussian_basis input")?;
    let target = oriented(g, side);
    let y = sketch_gaussian(&target, (r + opts.oversample).min(target.cols()), seed)?;
    let (p, deficient) = basis_from_sketch(&y, r, opts.truncation, seed)?;
    Ok(ProjectionBasis::from_parts(
        p,
        side,
        BasisMethod::Gaussian,
        deficient,
    ))
}

/// Orthonormal `r`-column basis for the dominant range of a sketch.
pub fn basis_from_sketch(
    y: &DenseMatrix,
    r: usize,
    truncation: Truncation,
    seed: u64,
) -> Result<(DenseMatrix, bool)> {
    let completion_seed = seed ^ 0xC0FF_EE00_D15E_A5E5;
    match truncation {
        Truncation::Leading => {
            let f = qr::orthonormal_range(y, r, completion_seed)?;
            let deficient = f.is_rank_deficient();
            Ok((f.q, deficient))
        }
        Truncation::Dominant => {
            let width = y.cols().min(y.rows()).max(r);
            let f: QrResult = qr::orthonormal_range(y, width, completion_seed)?;
            if f.rank <= r {
                // nothing beyond the leading directions to choose from
                let deficient = f.rank < r;
                return Ok((f.q.column_block(0, r), deficient));
            }
            // Y ≈ Q·R with R = QᵀY; the dominant r-dim subspace of Y is Q·W_r
            // where R = W Σ Zᵀ.
            let coeffs = f.q.t_matmul(y)?;
            let w = svd(&coeffs, true, false)?
                .u
                .expect("requested factor is present");
            let p = f.q.matmul(&w.column_block(0, r))?;
            Ok((p, false))
        }
    }
}

/// `‖G − P·PᵀG‖_F / ‖G‖_F` (Left) or `‖G − G·P·Pᵀ‖_F / ‖G‖_F` (Right).
/// Zero for `G = 0`.
pub fn subspace_residual(g: &DenseMatrix, p: &ProjectionBasis) -> Result<f64> {
    p.check_gradient(g, "subspace_residual")?;
    let norm = g.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let back = p.project_back(&p.project(g)?)?;
    Ok(g.sub(&back)?.frobenius_norm() / norm)
}

/// Principal angles (radians, ascending) between the spans of two bases.
pub fn principal_angles(p1: &ProjectionBasis, p2: &ProjectionBasis) -> Result<Vec<f64>> {
    if p1.ambient_dim() != p2.ambient_dim() || p1.rank() != p2.rank() {
        return Err(Error::dim(
            "principal_angles",
            format!("{}x{}", p1.ambient_dim(), p1.rank()),
            format!("{}x{}", p2.ambient_dim(), p2.rank()),
        ));
    }
    let cross = p1.matrix().t_matmul(p2.matrix())?;
    let mut angles: Vec<f64> = singular_values(&cross)?
        .into_iter()
        .map(|c| c.clamp(0.0, 1.0).acos())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qr::random_orthonormal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag_padded(values: &[f64], n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |i, j| {
            if i == j && i < values.len() {
                values[i]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn svd_of_diagonal() {
        let g = diag_padded(&[3.0, 2.0, 1.0], 4);
        let p = svd_basis(&g, 2, Side::Left).unwrap();
        let m = p.matrix();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((m.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(m.get(2, 0).abs() < 1e-12 && m.get(3, 1).abs() < 1e-12);
        assert_eq!(p.rank(), 2);
        assert_eq!(p.method(), BasisMethod::ExactSvd);
    }

    #[test]
    fn svd_rank_one() {
        let u = [1.0, -3.0, 2.0];
        let v = [0.5, 1.0, -1.0, 3.0];
        let g = DenseMatrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        let p = svd_basis(&g, 1, Side::Left).unwrap();
        // sign convention: largest-magnitude entry positive
        let un = 14f64.sqrt();
        let expected = [-1.0 / un, 3.0 / un, -2.0 / un];
        for (i, e) in expected.iter().enumerate() {
            assert!((p.matrix().get(i, 0) - e).abs() < 1e-12);
        }
        let pr = svd_basis(&g, 1, Side::Right).unwrap();
        let vn = crate::matrix::norm2(&v);
        for (j, x) in v.iter().enumerate() {
            assert!((pr.matrix().get(j, 0) - x / vn).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_rank_errors() {
        let g = DenseMatrix::zeros(3, 5);
        assert!(matches!(
            svd_basis(&g, 4, Side::Left),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            svd_basis(&g, 0, Side::Left),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn residual_of_diag_top2() {
        let g = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        let p = svd_basis(&g, 2, Side::Left).unwrap();
        let res = subspace_residual(&g, &p).unwrap();
        assert!((res - 1.0 / 14f64.sqrt()).abs() < 1e-12);
        assert!((res - 0.2673).abs() < 1e-4);
    }

    #[test]
    fn residual_extremes() {
        let g = DenseMatrix::from_fn(4, 3, |i, j| if i < 2 { (i + j + 1) as f64 } else { 0.0 });
        let inside = ProjectionBasis::from_matrix(
            DenseMatrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 }),
            Side::Left,
            BasisMethod::ExactSvd,
        )
        .unwrap();
        let outside = ProjectionBasis::from_matrix(
            DenseMatrix::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 }),
            Side::Left,
            BasisMethod::ExactSvd,
        )
        .unwrap();
        assert!(subspace_residual(&g, &inside).unwrap() < 1e-12);
        assert!((subspace_residual(&g, &outside).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            subspace_residual(&DenseMatrix::zeros(4, 3), &inside).unwrap(),
            0.0
        );
        assert!(subspace_residual(&DenseMatrix::zeros(5, 3), &inside).is_err());
    }

    #[test]
    fn angles_between_lines() {
        let theta: f64 = 0.3;
        let a = ProjectionBasis::from_matrix(
            DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap(),
            Side::Left,
            BasisMethod::ExactSvd,
        )
        .unwrap();
        let b = ProjectionBasis::from_matrix(
            DenseMatrix::new(2, 1, vec![theta.cos(), theta.sin()]).unwrap(),
            Side::Left,
            BasisMethod::ExactSvd,
        )
        .unwrap();
        let ang = principal_angles(&a, &b).unwrap();
        assert!((ang[0] - theta).abs() < 1e-12);
        assert!(principal_angles(&a, &a).unwrap()[0] < 1e-8);
    }

    #[test]
    fn angles_orthogonal_and_equal() {
        let q = random_orthonormal(10, 6, 3).unwrap();
        let p1 = ProjectionBasis::from_matrix(q.column_block(0, 3), Side::Left, BasisMethod::Srft)
            .unwrap();
        let p2 = ProjectionBasis::from_matrix(q.column_block(3, 6), Side::Left, BasisMethod::Srft)
            .unwrap();
        for a in principal_angles(&p1, &p2).unwrap() {
            assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-8);
        }
        for a in principal_angles(&p1, &p1).unwrap() {
            assert!(a < 1e-7);
        }
        let p3 = ProjectionBasis::from_matrix(q.column_block(0, 2), Side::Left, BasisMethod::Srft)
            .unwrap();
        assert!(principal_angles(&p1, &p3).is_err());
    }

    #[test]
    fn srft_zero_gradient_is_flagged() {
        let g = DenseMatrix::zeros(12, 20);
        let p = srft_basis(
            &g,
            4,
            Side::Left,
            SketchOptions::default().with_oversample(2),
            1,
        )
        .unwrap();
        assert!(p.is_rank_deficient());
        assert!(p.matrix().orthonormality_defect() < 1e-12);
    }

    #[test]
    fn srft_recovers_exact_rank_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = DenseMatrix::random_normal(40, 5, &mut rng);
        let b = DenseMatrix::random_normal(5, 70, &mut rng);
        let g = a.matmul(&b).unwrap();
        for trunc in [Truncation::Leading, Truncation::Dominant] {
            for mixing in [Mixing::UnitaryDct, Mixing::ComplexDft] {
                let opts = SketchOptions::default()
                    .with_oversample(4)
                    .with_truncation(trunc)
                    .with_mixing(mixing);
                let p = srft_basis(&g, 5, Side::Left, opts, 3).unwrap();
                assert!(
                    subspace_residual(&g, &p).unwrap() < 1e-10,
                    "{trunc:?} {mixing:?}"
                );
                assert!(!p.is_rank_deficient());
                let pr = srft_basis(&g, 5, Side::Right, opts, 3).unwrap();
                assert_eq!(pr.ambient_dim(), 70);
                assert!(subspace_residual(&g, &pr).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn projected_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = DenseMatrix::random_normal(128, 576, &mut rng);
        let p = srft_basis(&g, 128, Side::Left, SketchOptions::default(), 42).unwrap();
        assert_eq!(p.project(&g).unwrap().shape(), (128, 576));
        assert_eq!(p.projected_shape(128, 576), (128, 576));
    }

    #[test]
    fn oversampling_clamps_at_full_width() {
        let g = DenseMatrix::random_normal(64, 64, &mut ChaCha8Rng::seed_from_u64(4));
        let opts = SketchOptions::default().with_oversample(8);
        let p = srft_basis(&g, 64, Side::Left, opts, 1).unwrap();
        assert!(p.matrix().orthonormality_defect() < 1e-10);
        assert!(subspace_residual(&g, &p).unwrap() < 1e-10);
        assert!(gaussian_basis(&g, 64, Side::Left, opts, 1).is_ok());
    }
}
