use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{SyntheticDataset, SyntheticLandmarkSample};
use super::model::DualEncoderToy;
use super::regression::LinearRegressionToy;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::galore::{LrSchedule, Optimizer, OptimizerConfig, ParamSpec};
use crate::matrix::DenseMatrix;
use crate::sketch::derive_seed;

/// A model plus data that the training loop can drive.
pub trait ToyProblem {
    fn param_specs(&self) -> Vec<ParamSpec>;
    fn params(&self) -> &[DenseMatrix];
    fn params_mut(&mut self) -> &mut [DenseMatrix];
    fn steps_per_epoch(&self) -> usize;
    /// Loss and gradients of the mini-batch used at `step`.
    fn batch_loss_and_grad(&self, step: u64) -> Result<(f64, Vec<DenseMatrix>)>;
    /// Loss over the whole dataset.
    fn eval_loss(&self) -> Result<f64>;
    fn metrics(&self) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::new())
    }
}

/// Dual-encoder segmentation on a synthetic dataset.
pub struct SegmentationProblem {
    pub model: DualEncoderToy,
    pub dataset: SyntheticDataset,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl SegmentationProblem {
    pub fn new(
        model: DualEncoderToy,
        dataset: SyntheticDataset,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || dataset.is_empty() {
            return Err(Error::InvalidArgument(
                "batch size and dataset must be non-empty".into(),
            ));
        }
        Ok(Self {
            model,
            dataset,
            batch_size,
            shuffle_seed,
        })
    }

    fn batch(&self, step: u64) -> Vec<&SyntheticLandmarkSample> {
        let spe = self.steps_per_epoch() as u64;
        let (epoch, within) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.shuffle_seed,
            epoch,
            0,
        )));
        let mut picked: Vec<usize> = order
            .into_iter()
            .skip(within * self.batch_size)
            .take(self.batch_size)
            .collect();
        // fixed summation order inside a batch
        picked.sort_unstable();
        picked.iter().map(|&i| &self.dataset.samples[i]).collect()
    }
}

impl ToyProblem for SegmentationProblem {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.model.param_specs()
    }

    fn params(&self) -> &[DenseMatrix] {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut [DenseMatrix] {
        self.model.params_mut()
    }

    fn steps_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    fn batch_loss_and_grad(&self, step: u64) -> Result<(f64, Vec<DenseMatrix>)> {
        self.model.loss_and_grad(&self.batch(step))
    }

    fn eval_loss(&self) -> Result<f64> {
        let all: Vec<&SyntheticLandmarkSample> = self.dataset.samples.iter().collect();
        self.model.loss(&all)
    }

    fn metrics(&self) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::from([(
            "mean_dice".to_string(),
            self.model.mean_dice(&self.dataset.samples)?,
        )]))
    }
}

/// Full-batch least squares, starting from `W = 0`.
pub struct RegressionProblem {
    pub toy: LinearRegressionToy,
    weight: Vec<DenseMatrix>,
}

impl RegressionProblem {
    pub fn new(toy: LinearRegressionToy) -> Self {
        let (m, n) = toy.planted().shape();
        Self {
            toy,
            weight: vec![DenseMatrix::zeros(m, n)],
        }
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight[0]
    }
}

impl ToyProblem for RegressionProblem {
    fn param_specs(&self) -> Vec<ParamSpec> {
        vec![ParamSpec::new("weight", self.weight[0].shape(), true)]
    }

    fn params(&self) -> &[DenseMatrix] {
        &self.weight
    }

    fn params_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weight
    }

    fn steps_per_epoch(&self) -> usize {
        1
    }

    fn batch_loss_and_grad(&self, _step: u64) -> Result<(f64, Vec<DenseMatrix>)> {
        let (l, g) = self.toy.loss_and_grad(&self.weight[0])?;
        Ok((l, vec![g]))
    }

    fn eval_loss(&self) -> Result<f64> {
        self.toy.loss(&self.weight[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mini-batch loss before the update.
    pub loss: f64,
    pub lr: f64,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub epoch_wall_ns: Vec<u64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub metrics: BTreeMap<String, f64>,
    pub state_scalars: usize,
    /// Basis refresh steps of each projected parameter.
    pub refresh_steps: BTreeMap<String, Vec<u64>>,
    /// Step at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<u64>,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn ensure_converged(&self) -> Result<()> {
        match self.diverged_at {
            None => Ok(()),
            Some(s) => Err(Error::Numerical {
                context: "train_toy",
                detail: format!("training diverged at step {s}"),
            }),
        }
    }
}

/// Train `problem` for `settings.epochs` epochs and record a trace.
///
/// A non-finite loss, activation or gradient stops training early; the trace up to that
/// point is returned with `diverged_at` set.
pub fn train_toy<P: ToyProblem + ?Sized>(
    problem: &mut P,
    settings: &TrainSettings,
) -> Result<TrainTrace> {
    train_toy_with(problem, settings, ExecPolicy::default())
}

pub fn train_toy_with<P: ToyProblem + ?Sized>(
    problem: &mut P,
    settings: &TrainSettings,
    policy: ExecPolicy,
) -> Result<TrainTrace> {
    settings.schedule.validate()?;
    let specs = problem.param_specs();
    let mut opt = Optimizer::new(settings.optimizer, &specs)?.with_policy(policy);
    let spe = problem.steps_per_epoch() as u64;
    let initial_loss = problem.eval_loss()?;
    let mut records = Vec::new();
    let mut epoch_wall_ns = Vec::new();
    let mut diverged_at = None;
    'epochs: for epoch in 0..settings.epochs as u64 {
        let epoch_start = Instant::now();
        for within in 0..spe {
            let step = epoch * spe + within;
            let lr = settings.schedule.lr(step);
            let t0 = Instant::now();
            let (loss, grads) = match problem.batch_loss_and_grad(step) {
                Ok((loss, _)) if !loss.is_finite() => {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            match opt.step(problem.params_mut(), &grads, lr) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            records.push(StepRecord {
                step,
                loss,
                lr,
                wall_ns: t0.elapsed().as_nanos() as u64,
            });
        }
        epoch_wall_ns.push(epoch_start.elapsed().as_nanos() as u64);
    }
    let refresh_steps = specs
        .iter()
        .filter_map(|s| {
            opt.projected(&s.name)
                .map(|p| (s.name.clone(), p.refresh_steps().to_vec()))
        })
        .collect();
    let (final_loss, metrics) = if diverged_at.is_some() {
        (f64::NAN, BTreeMap::new())
    } else {
        (problem.eval_loss()?, problem.metrics()?)
    };
    Ok(TrainTrace {
        records,
        epoch_wall_ns,
        initial_loss,
        final_loss,
        metrics,
        state_scalars: opt.state_scalars(),
        refresh_steps,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::super::data::generate_synthetic_dataset;
    use super::super::model::ToyModelConfig;
    use super::super::regression::RegressionConfig;
    use super::*;
    use crate::galore::{AdamParams, GaloreConfig};

    fn settings(epochs: usize, lr: f64, optimizer: OptimizerConfig) -> TrainSettings {
        TrainSettings {
            epochs,
            schedule: LrSchedule::cosine(lr, lr * 0.01, epochs as u64),
            optimizer,
        }
    }

    fn galore8() -> OptimizerConfig {
        OptimizerConfig::galore(
            GaloreConfig {
                rank: 8,
                refresh_interval: 50,
                ..Default::default()
            },
            AdamParams::default(),
            0.0,
        )
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let mut p =
            RegressionProblem::new(LinearRegressionToy::new(RegressionConfig::default()).unwrap());
        let t = train_toy(&mut p, &settings(20, 0.0, galore8())).unwrap();
        let l = t.losses();
        assert!(l.iter().all(|&x| x == l[0]));

        let ds = generate_synthetic_dataset(4, 16, 16, 0).unwrap();
        let model = DualEncoderToy::new(ToyModelConfig {
            image_size: 16,
            model_dim: 16,
            ..Default::default()
        })
        .unwrap();
        let mut p = SegmentationProblem::new(model, ds, 4, 0).unwrap();
        let cfg = OptimizerConfig::full(AdamParams::default(), 0.0);
        let t = train_toy(
            &mut p,
            &TrainSettings {
                epochs: 3,
                schedule: LrSchedule::constant(0.0),
                optimizer: cfg,
            },
        )
        .unwrap();
        let l = t.losses();
        assert!(l.iter().all(|&x| x == l[0]));
    }

    #[test]
    fn full_adamw_solves_regression() {
        let mut p =
            RegressionProblem::new(LinearRegressionToy::new(RegressionConfig::default()).unwrap());
        let t = train_toy(
            &mut p,
            &settings(500, 5e-2, OptimizerConfig::full(AdamParams::default(), 0.0)),
        )
        .unwrap();
        assert!(t.final_loss <= 1e-3, "{}", t.final_loss);
    }

    #[test]
    fn galore_refreshes_on_schedule() {
        let mut p =
            RegressionProblem::new(LinearRegressionToy::new(RegressionConfig::default()).unwrap());
        let t = train_toy(&mut p, &settings(120, 5e-2, galore8())).unwrap();
        assert_eq!(t.refresh_steps["weight"], vec![0, 50, 100]);
        assert!(t.final_loss < t.initial_loss);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let mut p =
            RegressionProblem::new(LinearRegressionToy::new(RegressionConfig::default()).unwrap());
        let cfg = OptimizerConfig::full(AdamParams::default(), 0.0);
        let t = train_toy(
            &mut p,
            &TrainSettings {
                epochs: 10,
                schedule: LrSchedule::constant(f64::MAX),
                optimizer: cfg,
            },
        )
        .unwrap();
        assert!(t.diverged_at.is_some());
        assert!(!t.records.is_empty());
        assert!(t.ensure_converged().is_err());
    }

    #[test]
    fn segmentation_training_is_reproducible_and_learns() {
        let run = || {
            let ds = generate_synthetic_dataset(8, 16, 16, 2).unwrap();
            let model = DualEncoderToy::new(ToyModelConfig {
                image_size: 16,
                model_dim: 16,
                seed: 1,
                ..Default::default()
            })
            .unwrap();
            let mut p = SegmentationProblem::new(model, ds, 4, 3).unwrap();
            let opt = OptimizerConfig::galore(
                GaloreConfig {
                    rank: 8,
                    refresh_interval: 5,
                    ..Default::default()
                },
                AdamParams::default(),
                0.0,
            );
            train_toy(&mut p, &settings(10, 1e-2, opt)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.losses(), b.losses());
        assert!(
            a.final_loss < a.initial_loss,
            "{} -> {}",
            a.initial_loss,
            a.final_loss
        );
        assert_eq!(a.refresh_steps.len(), 4);
    }
}
