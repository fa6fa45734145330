use serde::{Deserialize, Serialize};

use super::adamw::{adam_direction_in_place, apply_update, AdamParams};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::matrix::DenseMatrix;
use crate::sketch::{derive_seed, Mixing};
use crate::subspace::{srft_basis, svd_basis, ProjectionBasis, Side, SketchOptions, Truncation};

/// How a refresh computes the new basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    /// Truncated SVD of the gradient.
    ExactSvd,
    /// SRFT sketch followed by QR.
    #[default]
    Srft,
}

/// Whether each refresh draws a new SRFT operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OperatorRedraw {
    #[default]
    PerRefresh,
    /// One operator per parameter for the whole run.
    Fixed,
}

/// Settings shared by every projected parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaloreConfig {
    pub rank: usize,
    pub refresh_interval: u64,
    pub scale: f64,
    pub method: ProjectionMethod,
    pub oversample: usize,
    pub mixing: Mixing,
    pub truncation: Truncation,
    pub reset_moments_on_refresh: bool,
    pub redraw: OperatorRedraw,
    /// `None` projects the smaller dimension.
    pub side: Option<Side>,
    pub seed: u64,
}

impl Default for GaloreConfig {
    fn default() -> Self {
        Self {
            rank: 128,
            refresh_interval: 50,
            scale: 1.0,
            method: ProjectionMethod::Srft,
            oversample: 0,
            mixing: Mixing::UnitaryDct,
            truncation: Truncation::Dominant,
            reset_moments_on_refresh: false,
            redraw: OperatorRedraw::PerRefresh,
            side: None,
            seed: 0,
        }
    }
}

impl GaloreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.refresh_interval == 0 {
            return Err(Error::InvalidArgument(
                "refresh interval must be at least 1".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidArgument("scale must be finite".into()));
        }
        Ok(())
    }

    /// Whether an `m×n` parameter can carry a rank-`rank` projection.
    pub fn fits(&self, m: usize, n: usize) -> bool {
        m >= self.rank && n >= self.rank
    }
}

/// Stable 64-bit key for a parameter name (FNV-1a).
pub(crate) fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// What happened during one projected step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub refreshed: bool,
    pub rank_deficient_basis: bool,
}

/// Per-parameter state of the projected optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GaloreParamState {
    pub(crate) name: String,
    pub(crate) shape: (usize, usize),
    pub(crate) side: Side,
    pub(crate) config: GaloreConfig,
    pub(crate) adam: AdamParams,
    pub(crate) basis: Option<ProjectionBasis>,
    pub(crate) moment1: DenseMatrix,
    pub(crate) moment2: DenseMatrix,
    pub(crate) step: u64,
    pub(crate) refresh_steps: Vec<u64>,
}

impl GaloreParamState {
    pub fn new(
        name: impl Into<String>,
        shape: (usize, usize),
        config: GaloreConfig,
        adam: AdamParams,
    ) -> Result<Self> {
        config.validate()?;
        adam.validate()?;
        let (m, n) = shape;
        if !config.fits(m, n) {
            return Err(Error::dim(
                "GaloreParamState::new",
                format!("both dimensions >= rank {}", config.rank),
                format!("{m}x{n}"),
            ));
        }
        let side = config.side.unwrap_or_else(|| Side::for_shape(m, n));
        let moment_shape = match side {
            Side::Left => (config.rank, n),
            Side::Right => (m, config.rank),
        };
        Ok(Self {
            name: name.into(),
            shape,
            side,
            config,
            adam,
            basis: None,
            moment1: DenseMatrix::zeros(moment_shape.0, moment_shape.1),
            moment2: DenseMatrix::zeros(moment_shape.0, moment_shape.1),
            step: 0,
            refresh_steps: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn config(&self) -> &GaloreConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamParams {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn basis(&self) -> Option<&ProjectionBasis> {
        self.basis.as_ref()
    }

    pub fn moment1(&self) -> &DenseMatrix {
        &self.moment1
    }

    pub fn moment2(&self) -> &DenseMatrix {
        &self.moment2
    }

    /// Steps at which a basis was (re)computed or installed.
    pub fn refresh_steps(&self) -> &[u64] {
        &self.refresh_steps
    }

    /// Scalars held as optimizer state (moments plus basis).
    pub fn state_scalars(&self) -> usize {
        let basis = self.side.ambient_dim(self.shape.0, self.shape.1) * self.config.rank;
        self.moment1.len() + self.moment2.len() + basis
    }

    /// Install an externally computed basis as if a refresh happened now.
    pub fn install_basis(&mut self, basis: ProjectionBasis) -> Result<()> {
        let ambient = self.side.ambient_dim(self.shape.0, self.shape.1);
        if basis.side() != self.side
            || basis.ambient_dim() != ambient
            || basis.rank() != self.config.rank
        {
            return Err(Error::dim(
                "install_basis",
                format!("{:?} basis {}x{}", self.side, ambient, self.config.rank),
                format!(
                    "{:?} basis {}x{}",
                    basis.side(),
                    basis.ambient_dim(),
                    basis.rank()
                ),
            ));
        }
        self.accept_basis(basis.with_birth_step(self.step));
        Ok(())
    }

    fn accept_basis(&mut self, basis: ProjectionBasis) {
        if self.basis.is_some() && self.config.reset_moments_on_refresh {
            self.moment1.scale(0.0);
            self.moment2.scale(0.0);
        }
        self.refresh_steps.push(basis.birth_step());
        self.basis = Some(basis);
    }

    fn needs_refresh(&self) -> bool {
        let due = self.step.is_multiple_of(self.config.refresh_interval);
        let fresh = self
            .basis
            .as_ref()
            .is_some_and(|b| b.birth_step() == self.step);
        self.basis.is_none() || (due && !fresh)
    }

    fn compute_basis(&self, grad: &DenseMatrix, policy: ExecPolicy) -> Result<ProjectionBasis> {
        let cfg = &self.config;
        let basis = match cfg.method {
            ProjectionMethod::ExactSvd => svd_basis(grad, cfg.rank, self.side)?,
            ProjectionMethod::Srft => {
                let draw = match cfg.redraw {
                    OperatorRedraw::PerRefresh => self.step / cfg.refresh_interval,
                    OperatorRedraw::Fixed => 0,
                };
                let seed = derive_seed(cfg.seed, name_key(&self.name), draw);
                let opts = SketchOptions::default()
                    .with_oversample(cfg.oversample)
                    .with_mixing(cfg.mixing)
                    .with_truncation(cfg.truncation)
                    .with_policy(policy);
                srft_basis(grad, cfg.rank, self.side, opts, seed)?
            }
        };
        Ok(basis.with_birth_step(self.step))
    }

    /// One projected AdamW step on `weight` given its gradient.
    pub fn galore_step(
        &mut self,
        weight: &mut DenseMatrix,
        grad: &DenseMatrix,
        lr: f64,
        weight_decay: f64,
    ) -> Result<StepInfo> {
        self.galore_step_with(weight, grad, lr, weight_decay, ExecPolicy::default())
    }

    pub fn galore_step_with(
        &mut self,
        weight: &mut DenseMatrix,
        grad: &DenseMatrix,
        lr: f64,
        weight_decay: f64,
        policy: ExecPolicy,
    ) -> Result<StepInfo> {
        if weight.shape() != self.shape || grad.shape() != self.shape {
            return Err(Error::dim(
                "galore_step",
                format!("{:?} for parameter '{}'", self.shape, self.name),
                format!("weight {:?}, grad {:?}", weight.shape(), grad.shape()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter '{}'", self.name),
            });
        }
        if !lr.is_finite() || !weight_decay.is_finite() {
            return Err(Error::NonFinite {
                what: "learning rate or weight decay".into(),
            });
        }

        let mut info = StepInfo {
            refreshed: false,
            rank_deficient_basis: false,
        };
        if self.needs_refresh() {
            let basis = self.compute_basis(grad, policy)?;
            info.refreshed = true;
            info.rank_deficient_basis = basis.is_rank_deficient();
            self.accept_basis(basis);
        }
        let basis = self.basis.as_ref().expect("basis present after refresh");

        let mut projected = basis.project(grad)?.into_vec();
        adam_direction_in_place(
            self.moment1.as_mut_slice(),
            self.moment2.as_mut_slice(),
            &mut projected,
            self.step + 1,
            &self.adam,
        );
        let (rows, cols) = self.moment1.shape();
        let normalized = DenseMatrix::from_parts(rows, cols, projected);
        let mut direction = basis.project_back(&normalized)?;
        if self.config.scale != 1.0 {
            direction.scale(self.config.scale);
        }
        apply_update(
            weight.as_mut_slice(),
            direction.as_slice(),
            lr,
            weight_decay,
        );
        self.step += 1;
        Ok(info)
    }
}
