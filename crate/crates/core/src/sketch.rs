//! Structured random sketches.
//!
//! The SRFT operator is `Ω = S·F·D`: a random ±1 diagonal `D`, a unitary fast
//! mixing transform `F` and a uniform row sampler `S`. Applying it to every
//! row of an `m×n` gradient costs `O(m·n·log n)` and produces the `m×ℓ`
//! sketch `Y = G·Ωᵀ` whose column space tracks the dominant left singular
//! subspace of `G`.
//!
//! The Gaussian sketch is kept alongside as the classical reference range
//! finder.

use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustdct::{DctPlanner, TransformType2And3};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::matrix::{norm2, DenseMatrix};

/// Which unitary transform plays the role of `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Orthonormal DCT-II. Real arithmetic end to end.
    #[default]
    UnitaryDct,
    /// Unitary DFT. Each sampled frequency contributes its real and
    /// imaginary parts as two real sketch columns.
    ComplexDft,
}

impl Mixing {
    /// Real sketch columns produced per sampled index.
    pub fn columns_per_sample(self) -> usize {
        match self {
            Mixing::UnitaryDct => 1,
            Mixing::ComplexDft => 2,
        }
    }
}

impl fmt::Display for Mixing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mixing::UnitaryDct => "dct",
            Mixing::ComplexDft => "dft",
        })
    }
}

#[derive(Clone)]
enum Plan {
    Dct(Arc<dyn TransformType2And3<f64>>),
    Dft(Arc<dyn Fft<f64>>),
}

/// Output of [`SrftOperator::apply_mixing`].
#[derive(Debug, Clone, PartialEq)]
pub enum MixedVector {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl MixedVector {
    pub fn norm(&self) -> f64 {
        match self {
            MixedVector::Real(v) => norm2(v),
            MixedVector::Complex(v) => {
                let flat: Vec<f64> = v.iter().flat_map(|c| [c.re, c.im]).collect();
                norm2(&flat)
            }
        }
    }
}

/// The subsampled randomized Fourier transform `Ω = S·F·D`.
///
/// Immutable after construction; cheap to clone (transform plans are shared).
#[derive(Clone)]
pub struct SrftOperator {
    input_dim: usize,
    sketch_dim: usize,
    sign_flips: Vec<f64>,
    sampled_indices: Vec<usize>,
    mixing: Mixing,
    seed: u64,
    plan: Plan,
}

impl fmt::Debug for SrftOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SrftOperator")
            .field("input_dim", &self.input_dim)
            .field("sketch_dim", &self.sketch_dim)
            .field("mixing", &self.mixing)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl PartialEq for SrftOperator {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.sketch_dim == other.sketch_dim
            && self.mixing == other.mixing
            && self.seed == other.seed
            && self.sampled_indices == other.sampled_indices
            && self
                .sign_flips
                .iter()
                .zip(&other.sign_flips)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Build the SRFT operator for vectors of length `input_dim`, sampling
/// `sketch_dim` transform coefficients. Signs and samples depend only on `seed`.
pub fn build_srft(
    input_dim: usize,
    sketch_dim: usize,
    mixing: Mixing,
    seed: u64,
) -> Result<SrftOperator> {
    if sketch_dim == 0 {
        return Err(Error::InvalidArgument(
            "sketch dimension must be at least 1".into(),
        ));
    }
    if sketch_dim > input_dim {
        return Err(Error::dim(
            "build_srft",
            format!("sketch_dim <= {input_dim}"),
            sketch_dim,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign_flips = (0..input_dim)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let sampled_indices = index::sample(&mut rng, input_dim, sketch_dim).into_vec();
    let plan = match mixing {
        Mixing::UnitaryDct => Plan::Dct(DctPlanner::new().plan_dct2(input_dim)),
        Mixing::ComplexDft => Plan::Dft(FftPlanner::new().plan_fft_forward(input_dim)),
    };
    Ok(SrftOperator {
        input_dim,
        sketch_dim,
        sign_flips,
        sampled_indices,
        mixing,
        seed,
        plan,
    })
}

/// Per-thread working memory for one operator.
struct Workspace {
    real: Vec<f64>,
    complex: Vec<Complex64>,
    scratch_real: Vec<f64>,
    scratch_complex: Vec<Complex64>,
}

impl SrftOperator {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketch_dim
    }

    pub fn sign_flips(&self) -> &[f64] {
        &self.sign_flips
    }

    pub fn sampled_indices(&self) -> &[usize] {
        &self.sampled_indices
    }

    pub fn mixing(&self) -> Mixing {
        self.mixing
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Real columns in a sketch produced by this operator.
    pub fn output_columns(&self) -> usize {
        self.sketch_dim * self.mixing.columns_per_sample()
    }

    /// Apply `D` in place.
    pub fn apply_signs(&self, v: &mut [f64]) -> Result<()> {
        self.check_len(v.len(), "apply_signs")?;
        v.iter_mut()
            .zip(&self.sign_flips)
            .for_each(|(x, s)| *x *= s);
        Ok(())
    }

    /// Compute `F·D·v` (full length, before subsampling).
    pub fn apply_mixing(&self, v: &[f64]) -> Result<MixedVector> {
        self.check_len(v.len(), "apply_mixing")?;
        let mut ws = self.workspace();
        ws.real.copy_from_slice(v);
        self.mix_in_place(&mut ws);
        Ok(match self.mixing {
            Mixing::UnitaryDct => MixedVector::Real(ws.real),
            Mixing::ComplexDft => MixedVector::Complex(ws.complex),
        })
    }

    /// Compute the sketch `Y = G·Ωᵀ` (`m × output_columns()`).
    pub fn sketch_columns(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.sketch_columns_with(g, ExecPolicy::default())
    }

    pub fn sketch_columns_with(&self, g: &DenseMatrix, policy: ExecPolicy) -> Result<DenseMatrix> {
        if g.cols() != self.input_dim {
            return Err(Error::dim(
                "sketch_columns",
                format!("{} columns", self.input_dim),
                format!("{} columns", g.cols()),
            ));
        }
        let width = self.output_columns();
        let mut out = vec![0.0; g.rows() * width];
        const ROWS_PER_TASK: usize = 16;
        exec::for_each_chunk_mut(policy, &mut out, ROWS_PER_TASK * width, |chunk, block| {
            let mut ws = self.workspace();
            for (local, dst) in block.chunks_mut(width).enumerate() {
                let row = chunk * ROWS_PER_TASK + local;
                ws.real.copy_from_slice(g.row(row));
                self.mix_in_place(&mut ws);
                self.sample_into(&ws, dst);
            }
        });
        Ok(DenseMatrix::from_parts(g.rows(), width, out))
    }

    fn check_len(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.input_dim {
            return Err(Error::dim(context, self.input_dim, len));
        }
        Ok(())
    }

    fn workspace(&self) -> Workspace {
        let n = self.input_dim;
        match &self.plan {
            Plan::Dct(p) => Workspace {
                real: vec![0.0; n],
                complex: Vec::new(),
                scratch_real: vec![0.0; p.get_scratch_len()],
                scratch_complex: Vec::new(),
            },
            Plan::Dft(p) => Workspace {
                real: vec![0.0; n],
                complex: vec![Complex64::new(0.0, 0.0); n],
                scratch_real: Vec::new(),
                scratch_complex: vec![Complex64::new(0.0, 0.0); p.get_inplace_scratch_len()],
            },
        }
    }

    /// `ws.real` holds `v` on entry; on exit `ws.real` (DCT) or `ws.complex`
    /// (DFT) holds `F·D·v`.
    fn mix_in_place(&self, ws: &mut Workspace) {
        let n = self.input_dim;
        ws.real
            .iter_mut()
            .zip(&self.sign_flips)
            .for_each(|(x, s)| *x *= s);
        match &self.plan {
            Plan::Dct(p) => {
                p.process_dct2_with_scratch(&mut ws.real, &mut ws.scratch_real);
                // rustdct leaves DCT-II unnormalized
                let dc = (1.0 / n as f64).sqrt();
                let ac = (2.0 / n as f64).sqrt();
                ws.real[0] *= dc;
                ws.real[1..].iter_mut().for_each(|x| *x *= ac);
            }
            Plan::Dft(p) => {
                for (c, &x) in ws.complex.iter_mut().zip(&ws.real) {
                    *c = Complex64::new(x, 0.0);
                }
                p.process_with_scratch(&mut ws.complex, &mut ws.scratch_complex);
                let s = 1.0 / (n as f64).sqrt();
                ws.complex.iter_mut().for_each(|c| *c *= s);
            }
        }
    }

    fn sample_into(&self, ws: &Workspace, dst: &mut [f64]) {
        match self.mixing {
            Mixing::UnitaryDct => {
                for (d, &k) in dst.iter_mut().zip(&self.sampled_indices) {
                    *d = ws.real[k];
                }
            }
            Mixing::ComplexDft => {
                for (pair, &k) in dst.chunks_mut(2).zip(&self.sampled_indices) {
                    pair[0] = ws.complex[k].re;
                    pair[1] = ws.complex[k].im;
                }
            }
        }
    }
}

/// Gaussian range-finder sketch `Y = G·Ω`, `Ω` with i.i.d. `N(0, 1/ℓ)` entries.
pub fn sketch_gaussian(g: &DenseMatrix, sketch_dim: usize, seed: u64) -> Result<DenseMatrix> {
    if sketch_dim == 0 {
        return Err(Error::InvalidArgument(
            "sketch dimension must be at least 1".into(),
        ));
    }
    if sketch_dim > g.cols() {
        return Err(Error::dim(
            "sketch_gaussian",
            format!("sketch_dim <= {}", g.cols()),
            sketch_dim,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omega = DenseMatrix::random_normal(g.cols(), sketch_dim, &mut rng);
    omega.scale(1.0 / (sketch_dim as f64).sqrt());
    g.matmul(&omega)
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
