use std::hint::black_box;

use lograd::exec::{self, ExecPolicy};
use lograd::galore::{
    memory_footprint, AdamParams, GaloreConfig, GaloreParamState, OptimizerConfig, ProjectionMethod,
};
use lograd::sketch::derive_seed;
use lograd::subspace::gaussian_basis;
use lograd::synth::planted_matrix;
use lograd::toytrain::{
    generate_synthetic_dataset, train_toy_with, DualEncoderToy, HybridWeights, SegmentationProblem,
    ToyModelConfig, ToyProblem, TrainSettings, TrainTrace,
};
use lograd::{
    principal_angles, srft_basis, subspace_residual, svd_basis, DenseMatrix, Side, SketchOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    BenchMethod, Command, RunConfig, SubspaceReference, TrainMethod, TrainOptimizer,
};
use crate::error::{CliError, CliResult};
use crate::table::{Cell, Table};
use crate::timing::measure;

/// A finished table plus an optional failure to report after writing it.
#[derive(Debug)]
pub struct Outcome {
    pub table: Table,
    pub failure: Option<CliError>,
}

impl From<Table> for Outcome {
    fn from(table: Table) -> Self {
        Self {
            table,
            failure: None,
        }
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<Outcome> {
    cfg.validate()?;
    match cfg.command {
        Command::BenchProjection => bench_projection(cfg).map(Outcome::from),
        Command::BenchSubspace => bench_subspace(cfg).map(Outcome::from),
        Command::TrainToy => train_toy_cmd(cfg),
        Command::AblateRank => ablate_rank(cfg),
        Command::MemoryReport => memory_report(cfg).map(Outcome::from),
    }
}

fn sketch_options(cfg: &RunConfig, policy: ExecPolicy) -> SketchOptions {
    SketchOptions::default()
        .with_oversample(cfg.oversample)
        .with_mixing(cfg.mixing)
        .with_truncation(cfg.truncation)
        .with_policy(policy)
}

pub const BENCH_PROJECTION_COLUMNS: &[&str] = &[
    "m",
    "n",
    "r",
    "oversample",
    "method",
    "seed",
    "median_ns",
    "iqr_ns",
    "repetitions",
    "inner_loops",
    "note",
];

/// Median-of-k wall time of each basis method; kernels run single-threaded.
pub fn bench_projection(cfg: &RunConfig) -> CliResult<Table> {
    let mut table = Table::new(BENCH_PROJECTION_COLUMNS);
    let opts = sketch_options(cfg, ExecPolicy::Sequential);
    for &(m, n) in &cfg.shapes {
        let side = Side::for_shape(m, n);
        for &r in &cfg.ranks {
            for &seed in &cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, m as u64, n as u64));
                let g = DenseMatrix::random_normal(m, n, &mut rng);
                for &method in &cfg.bench.methods {
                    let basis = |g: &DenseMatrix| match method {
                        BenchMethod::Svd => svd_basis(g, r, side),
                        BenchMethod::Srft => srft_basis(g, r, side, opts, seed),
                        BenchMethod::Gaussian => gaussian_basis(g, r, side, opts, seed),
                    };
                    // surface errors once, outside the timed region
                    basis(&g)?;
                    let t = measure(&cfg.timing, || {
                        black_box(basis(black_box(&g)).ok());
                    });
                    table.push(row_for(m, n, r, cfg, method.name(), seed, &t));
                }
                if cfg.bench.full_step {
                    for method in [ProjectionMethod::ExactSvd, ProjectionMethod::Srft] {
                        let gcfg = GaloreConfig {
                            rank: r,
                            refresh_interval: 1,
                            method,
                            oversample: cfg.oversample,
                            mixing: cfg.mixing,
                            truncation: cfg.truncation,
                            seed,
                            ..Default::default()
                        };
                        let mut st =
                            GaloreParamState::new("bench", (m, n), gcfg, AdamParams::default())?;
                        let mut w = DenseMatrix::zeros(m, n);
                        st.galore_step_with(&mut w, &g, 1e-6, 0.0, ExecPolicy::Sequential)?;
                        let t = measure(&cfg.timing, || {
                            black_box(
                                st.galore_step_with(&mut w, &g, 1e-6, 0.0, ExecPolicy::Sequential)
                                    .ok(),
                            );
                        });
                        let name = match method {
                            ProjectionMethod::ExactSvd => "svd+step",
                            ProjectionMethod::Srft => "srft+step",
                        };
                        table.push(row_for(m, n, r, cfg, name, seed, &t));
                    }
                }
            }
        }
    }
    Ok(table)
}

fn row_for(
    m: usize,
    n: usize,
    r: usize,
    cfg: &RunConfig,
    method: &str,
    seed: u64,
    t: &crate::timing::Timing,
) -> Vec<Cell> {
    vec![
        m.into(),
        n.into(),
        r.into(),
        cfg.oversample.into(),
        method.into(),
        seed.into(),
        t.median_ns.into(),
        t.iqr_ns.into(),
        t.samples_ns.len().into(),
        t.inner_loops.into(),
        t.note().into(),
    ]
}

pub const BENCH_SUBSPACE_COLUMNS: &[&str] = &[
    "m",
    "n",
    "spectrum",
    "r",
    "oversample",
    "seed",
    "optimal_residual",
    "svd_residual",
    "srft_residual",
    "gaussian_residual",
    "srft_ratio",
    "gaussian_ratio",
    "srft_max_angle",
    "gaussian_max_angle",
];

const RATIO_FLOOR: f64 = 1e-10;

/// Residual of SVD, SRFT and Gaussian bases on planted spectra.
pub fn bench_subspace(cfg: &RunConfig) -> CliResult<Table> {
    let mut points = Vec::new();
    for &(m, n) in &cfg.shapes {
        for &r in &cfg.ranks {
            for (kind, spectrum) in cfg.spectra(r) {
                for &seed in &cfg.seeds {
                    points.push((m, n, r, kind, spectrum, seed));
                }
            }
        }
    }
    let opts = sketch_options(cfg, ExecPolicy::Sequential);
    let rows = exec::map_indexed(
        ExecPolicy::default(),
        points.len(),
        |i| -> CliResult<Vec<Cell>> {
            let (m, n, r, kind, spectrum, seed) = points[i];
            let g = planted_matrix(m, n, spectrum, seed)?;
            let side = Side::for_shape(m, n);
            let optimal = spectrum.optimal_residual(m.min(n), r);
            let sketch_seed = derive_seed(seed, 0x5EED, r as u64);
            let srft = srft_basis(&g, r, side, opts, sketch_seed)?;
            let gauss = gaussian_basis(&g, r, side, opts, sketch_seed)?;
            let srft_res = subspace_residual(&g, &srft)?;
            let gauss_res = subspace_residual(&g, &gauss)?;
            let (svd_res, srft_angle, gauss_angle) = match cfg.subspace_reference {
                SubspaceReference::Exact => {
                    let p = svd_basis(&g, r, side)?;
                    let max = |q| -> CliResult<f64> {
                        Ok(principal_angles(&p, q)?.last().copied().unwrap_or(0.0))
                    };
                    (
                        Some(subspace_residual(&g, &p)?),
                        Some(max(&srft)?),
                        Some(max(&gauss)?),
                    )
                }
                SubspaceReference::Analytic => (None, None, None),
            };
            let reference = svd_res.unwrap_or(optimal);
            // a reference at round-off level means the rank is exact; no ratio
            let floor = RATIO_FLOOR * g.frobenius_norm();
            let ratio = |x: f64| (reference > floor).then(|| x / reference);
            Ok(vec![
                m.into(),
                n.into(),
                kind.name().into(),
                r.into(),
                cfg.oversample.into(),
                seed.into(),
                optimal.into(),
                svd_res.into(),
                srft_res.into(),
                gauss_res.into(),
                ratio(srft_res).into(),
                ratio(gauss_res).into(),
                srft_angle.into(),
                gauss_angle.into(),
            ])
        },
    );
    let mut table = Table::new(BENCH_SUBSPACE_COLUMNS);
    for r in rows {
        table.push(r?);
    }
    Ok(table)
}

/// Train the dual-encoder toy once. `rank` is ignored for plain AdamW.
pub fn run_training(
    cfg: &RunConfig,
    rank: usize,
    seed: u64,
) -> CliResult<(TrainTrace, Vec<lograd::galore::ParamSpec>)> {
    let t = &cfg.train;
    let dataset = generate_synthetic_dataset(t.dataset_size, t.image_size, t.image_size, seed)?;
    let model = DualEncoderToy::new(ToyModelConfig {
        image_size: t.image_size,
        patch: t.patch,
        model_dim: t.model_dim,
        heads: t.heads,
        loss: HybridWeights {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
        },
        seed,
    })?;
    let mut problem =
        SegmentationProblem::new(model, dataset, t.batch_size, derive_seed(seed, 0xDA7A, 0))?;
    let total = (t.epochs * problem.steps_per_epoch()) as u64;
    let optimizer = match t.optimizer {
        TrainOptimizer::Adamw => OptimizerConfig::full(AdamParams::default(), t.weight_decay),
        TrainOptimizer::Galore => OptimizerConfig::galore(
            GaloreConfig {
                rank,
                refresh_interval: cfg.refresh_interval,
                scale: t.scale,
                method: match t.method {
                    TrainMethod::Srft => ProjectionMethod::Srft,
                    TrainMethod::Svd => ProjectionMethod::ExactSvd,
                },
                oversample: cfg.oversample,
                mixing: cfg.mixing,
                truncation: cfg.truncation,
                reset_moments_on_refresh: t.reset_moments,
                redraw: t.redraw,
                side: None,
                seed,
            },
            AdamParams::default(),
            t.weight_decay,
        ),
    };
    let settings = TrainSettings {
        epochs: t.epochs,
        schedule: cfg.lr_schedule(total),
        optimizer,
    };
    let specs = problem.param_specs();
    let trace = train_toy_with(&mut problem, &settings, ExecPolicy::Sequential)?;
    Ok((trace, specs))
}

/// `(rank, seed)` run points; plain AdamW ignores ranks.
fn train_points(cfg: &RunConfig) -> Vec<(Option<usize>, u64)> {
    let ranks: Vec<Option<usize>> = match cfg.train.optimizer {
        TrainOptimizer::Galore => cfg.ranks.iter().map(|&r| Some(r)).collect(),
        TrainOptimizer::Adamw => vec![None],
    };
    ranks
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect()
}

fn divergence(trace: &TrainTrace, rank: Option<usize>, seed: u64) -> Option<CliError> {
    trace.diverged_at.map(|s| {
        CliError::Numerical(format!(
            "training diverged at step {s} (rank {}, seed {seed})",
            rank.map_or("-".to_string(), |r| r.to_string())
        ))
    })
}

pub const TRAIN_COLUMNS: &[&str] = &["rank", "seed", "step", "epoch", "loss", "lr", "wall_ns"];

/// Per-step loss trace of each run.
pub fn train_toy_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    let points = train_points(cfg);
    let runs = exec::map_indexed(ExecPolicy::default(), points.len(), |i| {
        let (rank, seed) = points[i];
        run_training(cfg, rank.unwrap_or(0), seed)
    });
    let mut table = Table::new(TRAIN_COLUMNS);
    let mut failure = None;
    for (&(rank, seed), run) in points.iter().zip(runs) {
        let (trace, _) = run?;
        let spe = (trace.records.len().max(1) as u64)
            .div_ceil(cfg.train.epochs as u64)
            .max(1);
        let spe = if trace.diverged_at.is_some() {
            spe_of(cfg)
        } else {
            spe
        };
        for rec in &trace.records {
            table.push(vec![
                rank.into(),
                seed.into(),
                rec.step.into(),
                (rec.step / spe).into(),
                rec.loss.into(),
                rec.lr.into(),
                rec.wall_ns.into(),
            ]);
        }
        failure = failure.or(divergence(&trace, rank, seed));
    }
    Ok(Outcome { table, failure })
}

fn spe_of(cfg: &RunConfig) -> u64 {
    cfg.train.dataset_size.div_ceil(cfg.train.batch_size) as u64
}

pub const ABLATE_COLUMNS: &[&str] = &[
    "rank",
    "seed",
    "steps",
    "initial_loss",
    "final_loss",
    "converged",
    "mean_dice",
    "mean_epoch_ns",
    "state_scalars",
    "full_state_scalars",
    "projected_scalars",
    "projected_full_scalars",
    "reduction_fraction",
];

/// Final loss, epoch time and memory accounting per rank.
pub fn ablate_rank(cfg: &RunConfig) -> CliResult<Outcome> {
    let points = train_points(cfg);
    let runs = exec::map_indexed(ExecPolicy::default(), points.len(), |i| {
        let (rank, seed) = points[i];
        run_training(cfg, rank.unwrap_or(0), seed)
    });
    let mut table = Table::new(ABLATE_COLUMNS);
    let mut failure = None;
    for (&(rank, seed), run) in points.iter().zip(runs) {
        let (trace, specs) = run?;
        let full_state: u64 = specs
            .iter()
            .map(|s| 2 * (s.shape.0 * s.shape.1) as u64)
            .sum();
        let (mut proj, mut proj_full) = (0u64, 0u64);
        if let Some(r) = rank {
            for s in specs.iter().filter(|s| s.projectable) {
                let f = memory_footprint(s.shape.0, s.shape.1, r, cfg.memory_store_basis)?;
                proj += f.projected_scalars;
                proj_full += f.full_scalars;
            }
        }
        let mean_epoch = if trace.epoch_wall_ns.is_empty() {
            f64::NAN
        } else {
            trace.epoch_wall_ns.iter().sum::<u64>() as f64 / trace.epoch_wall_ns.len() as f64
        };
        let converged = trace.diverged_at.is_none() && trace.final_loss < trace.initial_loss;
        table.push(vec![
            rank.into(),
            seed.into(),
            trace.records.len().into(),
            trace.initial_loss.into(),
            trace.final_loss.into(),
            (if converged { "true" } else { "false" }).into(),
            trace.metrics.get("mean_dice").copied().into(),
            mean_epoch.into(),
            trace.state_scalars.into(),
            full_state.into(),
            rank.map(|_| proj).into(),
            rank.map(|_| proj_full).into(),
            rank.map(|_| 1.0 - proj as f64 / proj_full as f64).into(),
        ]);
        failure = failure.or(divergence(&trace, rank, seed));
    }
    Ok(Outcome { table, failure })
}

pub const MEMORY_COLUMNS: &[&str] = &[
    "layer",
    "m",
    "n",
    "r",
    "side",
    "full_scalars",
    "projected_scalars",
    "reduction_fraction",
];

/// Per-layer and total optimizer-state accounting for each rank.
pub fn memory_report(cfg: &RunConfig) -> CliResult<Table> {
    let mut table = Table::new(MEMORY_COLUMNS);
    for &r in &cfg.ranks {
        let (mut full, mut proj) = (0u64, 0u64);
        for (i, &(m, n)) in cfg.shapes.iter().enumerate() {
            let f = memory_footprint(m, n, r, cfg.memory_store_basis)?;
            full += f.full_scalars;
            proj += f.projected_scalars;
            let side = match f.side {
                Side::Left => "left",
                Side::Right => "right",
            };
            table.push(vec![
                i.to_string().into(),
                m.into(),
                n.into(),
                r.into(),
                side.into(),
                f.full_scalars.into(),
                f.projected_scalars.into(),
                f.reduction_fraction.into(),
            ]);
        }
        let reduction = if full == 0 {
            0.0
        } else {
            1.0 - proj as f64 / full as f64
        };
        table.push(vec![
            "total".into(),
            Cell::Empty,
            Cell::Empty,
            r.into(),
            Cell::Empty,
            full.into(),
            proj.into(),
            reduction.into(),
        ]);
    }
    Ok(table)
}
