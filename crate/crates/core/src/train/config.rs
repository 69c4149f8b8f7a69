use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertRouting, FieldSchema, ModelConfig, TaskId};

/// Floating-point width used for parameters and activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!("unknown precision {other}, expected f32 or f64"))),
        }
    }
}

/// The five experimental arms: independent plain two-tower models,
/// single-task MVKE, and the joint model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "noMTL-ctr")]
    NoMtlCtr,
    #[serde(rename = "noMTL-cvr")]
    NoMtlCvr,
    #[serde(rename = "mvke-st-ctr")]
    MvkeStCtr,
    #[serde(rename = "mvke-st-cvr")]
    MvkeStCvr,
    #[default]
    #[serde(rename = "mvke-mt")]
    MvkeMt,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::NoMtlCtr, Mode::NoMtlCvr, Mode::MvkeStCtr, Mode::MvkeStCvr, Mode::MvkeMt];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoMtlCtr => "noMTL-ctr",
            Mode::NoMtlCvr => "noMTL-cvr",
            Mode::MvkeStCtr => "mvke-st-ctr",
            Mode::MvkeStCvr => "mvke-st-cvr",
            Mode::MvkeMt => "mvke-mt",
        }
    }

    /// Model for this arm. `n_experts` is ignored by the two-tower arms;
    /// the joint arm uses the five-expert split for k = 5 and the automatic
    /// split otherwise.
    pub fn model_config(self, schema: FieldSchema, n_experts: usize, hidden_dim: Option<usize>, tau_init: f64) -> Result<ModelConfig> {
        let mut cfg = match self {
            Mode::NoMtlCtr => ModelConfig::two_tower(schema, TaskId::Ctr),
            Mode::NoMtlCvr => ModelConfig::two_tower(schema, TaskId::Cvr),
            Mode::MvkeStCtr => ModelConfig::mvke(schema, ExpertRouting::single_task(n_experts, TaskId::Ctr)),
            Mode::MvkeStCvr => ModelConfig::mvke(schema, ExpertRouting::single_task(n_experts, TaskId::Cvr)),
            Mode::MvkeMt => ModelConfig::mvke(schema, ExpertRouting::for_count(n_experts)?),
        };
        match &mut cfg {
            ModelConfig::Mvke(c) => {
                c.hidden_dim = hidden_dim;
                c.tau_init = tau_init;
            }
            ModelConfig::TwoTower(c) => {
                c.hidden_dim = hidden_dim;
                c.tau_init = tau_init;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode {s}")))
    }
}

/// Which losses drive the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Ctr,
    Cvr,
    Multi,
}

impl TaskMode {
    pub fn tasks(self) -> Vec<TaskId> {
        match self {
            TaskMode::Ctr => vec![TaskId::Ctr],
            TaskMode::Cvr => vec![TaskId::Cvr],
            TaskMode::Multi => TaskId::ALL.to_vec(),
        }
    }

    /// Mode covering exactly the tasks a model predicts.
    pub fn for_tasks(tasks: &[TaskId]) -> Result<Self> {
        match tasks {
            [TaskId::Ctr] => Ok(TaskMode::Ctr),
            [TaskId::Cvr] => Ok(TaskMode::Cvr),
            [TaskId::Ctr, TaskId::Cvr] => Ok(TaskMode::Multi),
            other => Err(Error::Config(format!("no task mode for {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Losses to optimise; every task of the model when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_mode: Option<TaskMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            precision: Precision::F64,
            task_mode: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}
