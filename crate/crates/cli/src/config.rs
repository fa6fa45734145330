//! Run configuration: a TOML file of flat dotted keys layered over defaults,
//! with command-line flags applied last.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use lograd::galore::{LrSchedule, OperatorRedraw, ScheduleKind};
use lograd::subspace::Truncation;
use lograd::synth::Spectrum;
use lograd::Mixing;
use serde::Serialize;
use toml::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    BenchProjection,
    BenchSubspace,
    TrainToy,
    AblateRank,
    MemoryReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::BenchProjection => "bench-projection",
            Command::BenchSubspace => "bench-subspace",
            Command::TrainToy => "train-toy",
            Command::AblateRank => "ablate-rank",
            Command::MemoryReport => "memory-report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Basis methods that the projection benchmark can time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    Svd,
    Srft,
    Gaussian,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Svd => "svd",
            BenchMethod::Srft => "srft",
            BenchMethod::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    ExactRank,
    PowerLaw,
    Exponential,
}

impl SpectrumKind {
    pub fn name(self) -> &'static str {
        match self {
            SpectrumKind::ExactRank => "exact_rank",
            SpectrumKind::PowerLaw => "power_law",
            SpectrumKind::Exponential => "exponential",
        }
    }
}

/// Where the optimal residual of the subspace benchmark comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceReference {
    /// Truncated SVD of the test matrix; also yields principal angles.
    Exact,
    /// Closed form from the planted spectrum; no angles.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainOptimizer {
    Galore,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Srft,
    Svd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSettings {
    pub kinds: Vec<SpectrumKind>,
    pub exponent: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSettings {
    pub methods: Vec<BenchMethod>,
    pub full_step: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingSettings {
    pub repetitions: usize,
    pub warmup: usize,
    pub min_sample_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleSettings {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainSettingsCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub image_size: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub optimizer: TrainOptimizer,
    pub method: TrainMethod,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub reset_moments: bool,
    pub redraw: OperatorRedraw,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSettings {
    pub format: OutputFormat,
    pub path: Option<String>,
}

/// Everything a run depends on. Every field has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub shapes: Vec<(usize, usize)>,
    pub ranks: Vec<usize>,
    pub oversample: usize,
    pub refresh_interval: u64,
    pub mixing: Mixing,
    pub truncation: Truncation,
    pub seeds: Vec<u64>,
    pub spectrum: SpectrumSettings,
    pub bench: BenchSettings,
    pub timing: TimingSettings,
    pub subspace_reference: SubspaceReference,
    pub schedule: ScheduleSettings,
    pub train: TrainSettingsCfg,
    pub memory_store_basis: bool,
    pub output: OutputSettings,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        let sched = LrSchedule::default();
        Self {
            command,
            shapes: vec![(1024, 1024)],
            ranks: vec![32, 64, 128, 256],
            oversample: 8,
            refresh_interval: 50,
            mixing: Mixing::UnitaryDct,
            truncation: Truncation::Dominant,
            seeds: vec![0],
            spectrum: SpectrumSettings {
                kinds: vec![
                    SpectrumKind::ExactRank,
                    SpectrumKind::PowerLaw,
                    SpectrumKind::Exponential,
                ],
                exponent: 2.0,
                scale: 20.0,
            },
            bench: BenchSettings {
                methods: vec![BenchMethod::Svd, BenchMethod::Srft],
                full_step: false,
            },
            timing: TimingSettings {
                repetitions: 7,
                warmup: 2,
                min_sample_ns: 200_000,
            },
            subspace_reference: SubspaceReference::Exact,
            schedule: ScheduleSettings {
                initial_lr: sched.initial_lr,
                min_lr: sched.min_lr,
                kind: sched.kind,
            },
            train: TrainSettingsCfg {
                epochs: 3,
                batch_size: 4,
                dataset_size: 16,
                image_size: 32,
                patch: 4,
                model_dim: 256,
                heads: 4,
                optimizer: TrainOptimizer::Galore,
                method: TrainMethod::Srft,
                weight_decay: 0.0,
                lambda1: 1.0,
                lambda2: 1.0,
                reset_moments: false,
                redraw: OperatorRedraw::PerRefresh,
                scale: 1.0,
            },
            memory_store_basis: true,
            output: OutputSettings {
                format: OutputFormat::Csv,
                path: None,
            },
        }
    }

    /// Defaults, then the file at `path`.
    pub fn load(command: Command, path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(command, &text)
    }

    pub fn from_toml_str(command: Command, text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid TOML: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &Value::Table(table), &mut flat);
        let mut cfg = Self::defaults(command);
        let mut seen = BTreeSet::new();
        for (key, value) in flat {
            let canonical = match key.as_str() {
                "rank" => "ranks",
                "seed" => "seeds",
                k => k,
            };
            if !seen.insert(canonical.to_string()) {
                return Err(CliError::Config(format!("key '{key}' given twice")));
            }
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> CliResult<()> {
        match key {
            "command" => {
                let name = as_str(key, v)?;
                if name != self.command.name() {
                    return Err(CliError::Config(format!(
                        "config is for '{name}' but the command is '{}'",
                        self.command
                    )));
                }
            }
            "shapes" => self.shapes = as_shapes(key, v)?,
            "ranks" | "rank" => self.ranks = as_list(key, v, as_usize)?,
            "oversample" => self.oversample = as_usize(key, v)?,
            "refresh_interval" => self.refresh_interval = as_u64(key, v)?,
            "mixing" => {
                self.mixing = match as_str(key, v)? {
                    "dct" => Mixing::UnitaryDct,
                    "dft" => Mixing::ComplexDft,
                    other => return Err(bad_choice(key, other, "dct, dft")),
                }
            }
            "truncation" => {
                self.truncation = match as_str(key, v)? {
                    "dominant" => Truncation::Dominant,
                    "leading" => Truncation::Leading,
                    other => return Err(bad_choice(key, other, "dominant, leading")),
                }
            }
            "seeds" | "seed" => self.seeds = as_list(key, v, as_u64)?,
            "spectrum.kinds" => {
                self.spectrum.kinds = as_list(key, v, |k, x| match as_str(k, x)? {
                    "exact_rank" => Ok(SpectrumKind::ExactRank),
                    "power_law" => Ok(SpectrumKind::PowerLaw),
                    "exponential" => Ok(SpectrumKind::Exponential),
                    other => Err(bad_choice(k, other, "exact_rank, power_law, exponential")),
                })?
            }
            "spectrum.exponent" => self.spectrum.exponent = as_f64(key, v)?,
            "spectrum.scale" => self.spectrum.scale = as_f64(key, v)?,
            "bench.methods" => {
                self.bench.methods = as_list(key, v, |k, x| match as_str(k, x)? {
                    "svd" => Ok(BenchMethod::Svd),
                    "srft" => Ok(BenchMethod::Srft),
                    "gaussian" => Ok(BenchMethod::Gaussian),
                    other => Err(bad_choice(k, other, "svd, srft, gaussian")),
                })?
            }
            "bench.full_step" => self.bench.full_step = as_bool(key, v)?,
            "timing.repetitions" => self.timing.repetitions = as_usize(key, v)?,
            "timing.warmup" => self.timing.warmup = as_usize(key, v)?,
            "timing.min_sample_ns" => self.timing.min_sample_ns = as_u64(key, v)?,
            "subspace.reference" => {
                self.subspace_reference = match as_str(key, v)? {
                    "exact" => SubspaceReference::Exact,
                    "analytic" => SubspaceReference::Analytic,
                    other => return Err(bad_choice(key, other, "exact, analytic")),
                }
            }
            "schedule.initial_lr" => self.schedule.initial_lr = as_f64(key, v)?,
            "schedule.min_lr" => self.schedule.min_lr = as_f64(key, v)?,
            "schedule.kind" => {
                self.schedule.kind = match as_str(key, v)? {
                    "cosine" => ScheduleKind::Cosine,
                    "constant" => ScheduleKind::Constant,
                    other => return Err(bad_choice(key, other, "cosine, constant")),
                }
            }
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.dataset_size" => self.train.dataset_size = as_usize(key, v)?,
            "train.image_size" => self.train.image_size = as_usize(key, v)?,
            "train.patch" => self.train.patch = as_usize(key, v)?,
            "train.model_dim" => self.train.model_dim = as_usize(key, v)?,
            "train.heads" => self.train.heads = as_usize(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match as_str(key, v)? {
                    "galore" => TrainOptimizer::Galore,
                    "adamw" => TrainOptimizer::Adamw,
                    other => return Err(bad_choice(key, other, "galore, adamw")),
                }
            }
            "train.method" => {
                self.train.method = match as_str(key, v)? {
                    "srft" => TrainMethod::Srft,
                    "svd" => TrainMethod::Svd,
                    other => return Err(bad_choice(key, other, "srft, svd")),
                }
            }
            "train.weight_decay" => self.train.weight_decay = as_f64(key, v)?,
            "train.lambda1" => self.train.lambda1 = as_f64(key, v)?,
            "train.lambda2" => self.train.lambda2 = as_f64(key, v)?,
            "train.reset_moments" => self.train.reset_moments = as_bool(key, v)?,
            "train.redraw" => {
                self.train.redraw = match as_str(key, v)? {
                    "per_refresh" => OperatorRedraw::PerRefresh,
                    "fixed" => OperatorRedraw::Fixed,
                    other => return Err(bad_choice(key, other, "per_refresh, fixed")),
                }
            }
            "train.scale" => self.train.scale = as_f64(key, v)?,
            "memory.store_basis" => self.memory_store_basis = as_bool(key, v)?,
            "output.format" => {
                self.output.format = match as_str(key, v)? {
                    "csv" => OutputFormat::Csv,
                    "json" => OutputFormat::Json,
                    other => return Err(bad_choice(key, other, "csv, json")),
                }
            }
            "output.path" => self.output.path = Some(as_str(key, v)?.to_string()),
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn spectra(&self, rank: usize) -> Vec<(SpectrumKind, Spectrum)> {
        self.spectrum
            .kinds
            .iter()
            .map(|&k| {
                let s = match k {
                    SpectrumKind::ExactRank => Spectrum::ExactRank { rank },
                    SpectrumKind::PowerLaw => Spectrum::PowerLaw {
                        exponent: self.spectrum.exponent,
                    },
                    SpectrumKind::Exponential => Spectrum::Exponential {
                        scale: self.spectrum.scale,
                    },
                };
                (k, s)
            })
            .collect()
    }

    pub fn lr_schedule(&self, total_steps: u64) -> LrSchedule {
        LrSchedule {
            initial_lr: self.schedule.initial_lr,
            min_lr: self.schedule.min_lr,
            total_steps,
            kind: self.schedule.kind,
        }
    }

    /// Check the invariants that the selected command relies on.
    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return fail("ranks must be a non-empty list of positive counts".into());
        }
        if self.timing.repetitions == 0 {
            return fail("timing.repetitions must be >= 1".into());
        }
        let sched = self.lr_schedule(1);
        if let Err(e) = sched.validate() {
            return fail(e.to_string());
        }
        match self.command {
            Command::BenchProjection | Command::BenchSubspace | Command::MemoryReport => {
                if self.shapes.is_empty() {
                    return fail("shapes must not be empty".into());
                }
                for &(m, n) in &self.shapes {
                    for &r in &self.ranks {
                        if r > m.min(n) {
                            return fail(format!(
                                "rank {r} exceeds min dimension of shape {m}x{n}"
                            ));
                        }
                    }
                }
                if self.command == Command::BenchProjection && self.bench.methods.is_empty() {
                    return fail("bench.methods must not be empty".into());
                }
                if self.command == Command::BenchSubspace && self.spectrum.kinds.is_empty() {
                    return fail("spectrum.kinds must not be empty".into());
                }
            }
            Command::TrainToy | Command::AblateRank => {
                let t = &self.train;
                if t.epochs == 0 || t.batch_size == 0 || t.dataset_size == 0 {
                    return fail(
                        "train.epochs, train.batch_size and train.dataset_size must be >= 1".into(),
                    );
                }
                if t.patch == 0 || !t.image_size.is_multiple_of(t.patch) {
                    return fail(format!(
                        "train.image_size {} is not a multiple of train.patch {}",
                        t.image_size, t.patch
                    ));
                }
                if t.heads == 0 || !t.model_dim.is_multiple_of(t.heads) {
                    return fail(format!(
                        "train.model_dim {} is not a multiple of train.heads {}",
                        t.model_dim, t.heads
                    ));
                }
                if t.optimizer == TrainOptimizer::Galore {
                    if let Some(r) = self.ranks.iter().find(|&&r| r > t.model_dim) {
                        return fail(format!("rank {r} exceeds train.model_dim {}", t.model_dim));
                    }
                }
                if self.refresh_interval == 0 {
                    return fail("refresh_interval must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, x) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn type_error(key: &str, want: &str, v: &Value) -> CliError {
    CliError::Config(format!("key '{key}': expected {want}, got {v}"))
}

fn bad_choice(key: &str, got: &str, allowed: &str) -> CliError {
    CliError::Config(format!(
        "key '{key}': unknown value '{got}' (allowed: {allowed})"
    ))
}

fn as_str<'a>(key: &str, v: &'a Value) -> CliResult<&'a str> {
    v.as_str().ok_or_else(|| type_error(key, "a string", v))
}

fn as_bool(key: &str, v: &Value) -> CliResult<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "a boolean", v))
}

fn as_u64(key: &str, v: &Value) -> CliResult<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| type_error(key, "a non-negative integer", v))
}

fn as_usize(key: &str, v: &Value) -> CliResult<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &Value) -> CliResult<f64> {
    match v {
        Value::Float(f) if f.is_finite() => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_error(key, "a finite number", v)),
    }
}

/// A scalar is accepted as a one-element list.
fn as_list<T>(key: &str, v: &Value, f: impl Fn(&str, &Value) -> CliResult<T>) -> CliResult<Vec<T>> {
    match v {
        Value::Array(a) => a.iter().map(|x| f(key, x)).collect(),
        other => Ok(vec![f(key, other)?]),
    }
}

fn as_shapes(key: &str, v: &Value) -> CliResult<Vec<(usize, usize)>> {
    let arr = v
        .as_array()
        .ok_or_else(|| type_error(key, "a list of [m, n] pairs", v))?;
    arr.iter()
        .map(|p| match p.as_array().map(|a| a.as_slice()) {
            Some([m, n]) => {
                let (m, n) = (as_usize(key, m)?, as_usize(key, n)?);
                if m == 0 || n == 0 {
                    return Err(CliError::Config(format!(
                        "key '{key}': zero dimension in {m}x{n}"
                    )));
                }
                Ok((m, n))
            }
            _ => Err(type_error(key, "an [m, n] pair", p)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = RunConfig::from_toml_str(
            Command::TrainToy,
            "train.epochs = 5\nschedule.initial_lr = 1e-3\n",
        )
        .unwrap();
        let b = RunConfig::from_toml_str(
            Command::TrainToy,
            "[train]\nepochs = 5\n[schedule]\ninitial_lr = 0.001\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.epochs, 5);
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::defaults(Command::AblateRank);
        assert_eq!(c.ranks, vec![32, 64, 128, 256]);
        assert_eq!(c.refresh_interval, 50);
        assert_eq!((c.timing.repetitions, c.timing.warmup), (7, 2));
        assert_eq!((c.train.lambda1, c.train.lambda2), (1.0, 1.0));
        assert_eq!(c.schedule.initial_lr, 5e-5);
        assert_eq!(c.schedule.min_lr, 1e-6);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let bad = |s: &str| RunConfig::from_toml_str(Command::BenchProjection, s).unwrap_err();
        assert!(bad("nonsense = 1").to_string().contains("unknown key"));
        assert!(bad("oversample = -1").to_string().contains("non-negative"));
        assert!(bad("mixing = \"fft\"").to_string().contains("allowed"));
        assert!(bad("command = \"train-toy\"")
            .to_string()
            .contains("command"));
        assert!(bad("shapes = [[3]]").to_string().contains("pair"));
        assert!(bad("ranks = 4\nrank = 5").to_string().contains("twice"));
        assert!(bad("= oops").to_string().contains("TOML"));
        let c = RunConfig::from_toml_str(
            Command::BenchProjection,
            "shapes = [[64, 32]]\nranks = [33]",
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let c = RunConfig::from_toml_str(Command::TrainToy, "seeds = []").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn scalar_lists() {
        let c = RunConfig::from_toml_str(Command::MemoryReport, "rank = 16\nseed = 3").unwrap();
        assert_eq!(c.ranks, vec![16]);
        assert_eq!(c.seeds, vec![3]);
    }
}
