use serde::{Deserialize, Serialize};

use super::adamw::{full_adamw_step, AdamParams, FullAdamState};
use super::state::{GaloreConfig, GaloreParamState};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::matrix::DenseMatrix;

/// A named trainable parameter as seen by the optimizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    /// Eligible for low-rank projection (attention `qkv`/`proj` weights).
    pub projectable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: (usize, usize), projectable: bool) -> Self {
        Self {
            name: name.into(),
            shape,
            projectable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Full-matrix AdamW on every parameter.
    FullAdamW,
    /// Projected AdamW on projectable parameters, full AdamW elsewhere.
    Galore(GaloreConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub adam: AdamParams,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn full(adam: AdamParams, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::FullAdamW,
            adam,
            weight_decay,
        }
    }

    pub fn galore(galore: GaloreConfig, adam: AdamParams, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Galore(galore),
            adam,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotState {
    Projected(GaloreParamState),
    Full(FullAdamState),
}

/// Optimizer over a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    specs: Vec<ParamSpec>,
    slots: Vec<SlotState>,
    policy: ExecPolicy,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, specs: &[ParamSpec]) -> Result<Self> {
        config.adam.validate()?;
        let slots = specs
            .iter()
            .map(|s| match &config.kind {
                OptimizerKind::Galore(g) if s.projectable && g.fits(s.shape.0, s.shape.1) => {
                    GaloreParamState::new(s.name.clone(), s.shape, *g, config.adam)
                        .map(SlotState::Projected)
                }
                _ => Ok(SlotState::Full(FullAdamState::new(s.shape.0, s.shape.1))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            specs: specs.to_vec(),
            slots,
            policy: ExecPolicy::default(),
        })
    }

    pub fn with_policy(mut self, policy: ExecPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn slots(&self) -> &[SlotState] {
        &self.slots
    }

    /// The projected state of a parameter, if it has one.
    pub fn projected(&self, name: &str) -> Option<&GaloreParamState> {
        self.specs
            .iter()
            .zip(&self.slots)
            .find(|(s, _)| s.name == name)
            .and_then(|(_, st)| match st {
                SlotState::Projected(p) => Some(p),
                SlotState::Full(_) => None,
            })
    }

    /// Total optimizer-state scalars across parameters.
    pub fn state_scalars(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                SlotState::Projected(p) => p.state_scalars(),
                SlotState::Full(f) => f.state_scalars(),
            })
            .sum()
    }

    /// Step every parameter. Parameters are independent, so they may be
    /// processed concurrently; each one is updated sequentially.
    pub fn step(
        &mut self,
        weights: &mut [DenseMatrix],
        grads: &[DenseMatrix],
        lr: f64,
    ) -> Result<()> {
        if weights.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::dim(
                "Optimizer::step",
                format!("{} parameters", self.slots.len()),
                format!("{} weights, {} grads", weights.len(), grads.len()),
            ));
        }
        let adam = self.config.adam;
        let decay = self.config.weight_decay;
        // projection kernels run inline; the fan-out happens across parameters
        let inner = ExecPolicy::Sequential;
        let mut work: Vec<(&mut SlotState, &mut DenseMatrix, &DenseMatrix, &ParamSpec)> = self
            .slots
            .iter_mut()
            .zip(weights.iter_mut())
            .zip(grads)
            .zip(&self.specs)
            .map(|(((s, w), g), spec)| (s, w, g, spec))
            .collect();
        let mut results: Vec<Result<()>> = (0..work.len()).map(|_| Ok(())).collect();
        let mut paired: Vec<_> = work.iter_mut().zip(results.iter_mut()).collect();
        exec::for_each_mut(self.policy, &mut paired, |_, (item, out)| {
            let (slot, w, g, spec) = &mut **item;
            **out = match slot {
                SlotState::Projected(p) => p.galore_step_with(w, g, lr, decay, inner).map(|_| ()),
                SlotState::Full(f) => {
                    full_adamw_step(w, g, f, lr, &adam, decay).map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFinite {
                            what: format!("gradient or weight of parameter '{}'", spec.name),
                        },
                        other => other,
                    })
                }
            };
        });
        results.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("attn.qkv", (24, 8), true),
            ParamSpec::new("attn.proj", (8, 8), true),
            ParamSpec::new("embed", (8, 3), true),
            ParamSpec::new("head", (6, 8), false),
        ]
    }

    #[test]
    fn routes_parameters_by_tag_and_size() {
        let g = GaloreConfig {
            rank: 4,
            ..Default::default()
        };
        let opt = Optimizer::new(
            OptimizerConfig::galore(g, AdamParams::default(), 0.0),
            &specs(),
        )
        .unwrap();
        assert!(opt.projected("attn.qkv").is_some());
        assert!(opt.projected("attn.proj").is_some());
        // 8x3 cannot hold rank 4; untagged head stays full
        assert!(opt.projected("embed").is_none());
        assert!(opt.projected("head").is_none());
        let full =
            Optimizer::new(OptimizerConfig::full(AdamParams::default(), 0.0), &specs()).unwrap();
        assert!(full.state_scalars() > opt.state_scalars());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let g = GaloreConfig {
            rank: 4,
            refresh_interval: 3,
            ..Default::default()
        };
        let cfg = OptimizerConfig::galore(g, AdamParams::default(), 0.01);
        let run = |policy| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut opt = Optimizer::new(cfg, &specs()).unwrap().with_policy(policy);
            let mut ws: Vec<DenseMatrix> = specs()
                .iter()
                .map(|s| DenseMatrix::random_normal(s.shape.0, s.shape.1, &mut rng))
                .collect();
            for _ in 0..7 {
                let gs: Vec<DenseMatrix> = specs()
                    .iter()
                    .map(|s| DenseMatrix::random_normal(s.shape.0, s.shape.1, &mut rng))
                    .collect();
                opt.step(&mut ws, &gs, 1e-2).unwrap();
            }
            ws
        };
        assert_eq!(run(ExecPolicy::Sequential), run(ExecPolicy::Parallel));
    }

    #[test]
    fn step_errors() {
        let mut opt =
            Optimizer::new(OptimizerConfig::full(AdamParams::default(), 0.0), &specs()).unwrap();
        let mut ws: Vec<DenseMatrix> = specs()
            .iter()
            .map(|s| DenseMatrix::zeros(s.shape.0, s.shape.1))
            .collect();
        let mut gs = ws.clone();
        assert!(opt.step(&mut ws[..2], &gs, 0.1).is_err());
        gs[3].set(0, 0, f64::NAN);
        let err = opt.step(&mut ws, &gs, 0.1).unwrap_err();
        assert!(err.to_string().contains("head"), "{err}");
    }
}
