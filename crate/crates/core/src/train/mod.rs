//! Joint-loss training with Adam and best-epoch selection.

mod adam;
mod config;
mod fit;

pub use adam::{adam_step, OptimizerState};
pub use config::{Mode, Precision, TaskMode, TrainConfig};
pub use fit::{fit, mtl_loss, EpochRecord, History};
