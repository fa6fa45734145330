//! Projected AdamW: moments live in a rank-`r` subspace that is refreshed
//! every `T` steps from the current gradient.

mod adamw;
mod checkpoint;
mod memory;
mod optimizer;
mod schedule;
mod state;

pub use adamw::{full_adamw_step, AdamParams, FullAdamState};
pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use memory::{memory_footprint, MemoryFootprint};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind, ParamSpec, SlotState};
pub use schedule::{schedule_lr, LrSchedule, ScheduleKind};
pub use state::{GaloreConfig, GaloreParamState, OperatorRedraw, ProjectionMethod, StepInfo};
