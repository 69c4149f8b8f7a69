//! Synthetic click/conversion logs and their on-disk format.

mod example;
mod generator;
mod io;

pub use example::{Dataset, Example};
pub use generator::{bayes_auc, generate, DataSchema, GeneratorConfig, Generated, GroundTruth};
pub use io::{read_dataset, read_json, write_dataset, write_json};

/// File names inside a generated data directory.
pub mod files {
    pub const TRAIN: &str = "train.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const TRUTH: &str = "truth.json";
    pub const SCHEMA: &str = "schema.json";
}
