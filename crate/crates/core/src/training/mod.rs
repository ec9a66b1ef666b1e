//! Optimisation: the epoch loop, schedules, the learning-rate finder,
//! evaluation, checkpoints and the metric event log.

pub mod checkpoint;
pub mod evaluate;
pub mod events;
pub mod fit;
pub mod lr_find;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use evaluate::{evaluate, EvalOptions, Evaluation, Segmenter};
pub use events::{EventLog, MetricEvent, Split};
pub use fit::{fit, FitOptions, FitOutcome, ModelProbe, Monitor, Schedule, TrainConfig};
pub use lr_find::{lr_find, LrFindResult, LrProbe};
pub use schedule::{one_cycle, OneCycle};
