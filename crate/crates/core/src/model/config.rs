use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two tagging tasks: click (interest) and conversion (intention).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Ctr,
    Cvr,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::Ctr, TaskId::Cvr];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Ctr => "ctr",
            TaskId::Cvr => "cvr",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctr" => Ok(TaskId::Ctr),
            "cvr" => Ok(TaskId::Cvr),
            other => Err(Error::Usage(format!("unknown task {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub user_fields: Vec<FieldSpec>,
    pub tag_vocab: usize,
    pub embed_dim: usize,
}

impl FieldSchema {
    pub fn validate(&self) -> Result<()> {
        if self.user_fields.is_empty() {
            return Err(Error::Config("schema needs at least one user field".into()));
        }
        if let Some(f) = self.user_fields.iter().find(|f| f.vocab == 0) {
            return Err(Error::Config(format!("field {} has an empty vocabulary", f.name)));
        }
        if self.tag_vocab < 2 {
            return Err(Error::Config(format!("tag vocabulary must be at least 2, got {}", self.tag_vocab)));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be at least 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    pub fn n_fields(&self) -> usize {
        self.user_fields.len()
    }
}

/// Assignment of experts to tasks. An empty set disables that task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRouting {
    pub n_experts: usize,
    pub ctr: Vec<usize>,
    pub cvr: Vec<usize>,
}

impl ExpertRouting {
    /// Five experts: the first three serve clicks, the last four conversions.
    pub fn five_experts() -> Self {
        ExpertRouting { n_experts: 5, ctr: vec![0, 1, 2], cvr: vec![1, 2, 3, 4] }
    }

    /// Routing for an arbitrary expert count: `max(1, (k-2)/2)` exclusive
    /// experts per task at either end, the rest shared in the middle.
    pub fn auto_split(k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::Config(format!("automatic routing needs at least 3 experts, got {k}")));
        }
        let exclusive = ((k - 2) / 2).max(1);
        let r = ExpertRouting {
            n_experts: k,
            ctr: (0..k - exclusive).collect(),
            cvr: (exclusive..k).collect(),
        };
        r.validate()?;
        Ok(r)
    }

    /// The five-expert routing for k = 5, automatic split otherwise.
    pub fn for_count(k: usize) -> Result<Self> {
        if k == 5 {
            Ok(Self::five_experts())
        } else {
            Self::auto_split(k)
        }
    }

    /// Every expert serves the one task.
    pub fn single_task(k: usize, task: TaskId) -> Self {
        let all: Vec<usize> = (0..k).collect();
        match task {
            TaskId::Ctr => ExpertRouting { n_experts: k, ctr: all, cvr: vec![] },
            TaskId::Cvr => ExpertRouting { n_experts: k, ctr: vec![], cvr: all },
        }
    }

    pub fn set(&self, task: TaskId) -> &[usize] {
        match task {
            TaskId::Ctr => &self.ctr,
            TaskId::Cvr => &self.cvr,
        }
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        TaskId::ALL.into_iter().filter(|&t| !self.set(t).is_empty()).collect()
    }

    pub fn shared(&self) -> Vec<usize> {
        self.ctr.iter().copied().filter(|e| self.cvr.contains(e)).collect()
    }

    /// Experts used by at least one enabled task, ascending.
    pub fn used(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.ctr.iter().chain(&self.cvr).copied().collect();
        set.into_iter().collect()
    }

    /// Index ranges, ordering, no orphan expert, at least one task.
    pub fn validate_structure(&self) -> Result<()> {
        let k = self.n_experts;
        if k == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        for t in TaskId::ALL {
            let s = self.set(t);
            if s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!("{t} expert set must be strictly ascending: {s:?}")));
            }
            if let Some(e) = s.iter().find(|&&e| e >= k) {
                return Err(Error::Config(format!("{t} expert {e} out of range for {k} experts")));
            }
        }
        if self.tasks().is_empty() {
            return Err(Error::Config("routing enables no task".into()));
        }
        if self.used().len() != k {
            return Err(Error::Config("every expert must serve at least one task".into()));
        }
        Ok(())
    }

    /// Structure plus the sharing rules: with both tasks enabled, at least
    /// one shared expert and at least one exclusive expert per task.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.tasks().len() == 2 {
            let shared = self.shared();
            if shared.is_empty() {
                return Err(Error::Config("tasks must share at least one expert".into()));
            }
            for t in TaskId::ALL {
                if self.set(t).len() == shared.len() {
                    return Err(Error::Config(format!("{t} needs at least one exclusive expert")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvkeConfig {
    pub schema: FieldSchema,
    pub routing: ExpertRouting,
    /// Expert-head hidden width; `2 * embed_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTowerConfig {
    pub schema: FieldSchema,
    pub task: TaskId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau_init: f64,
}

fn default_tau() -> f64 {
    5.0
}

/// Architecture plus its dimensions, stored as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Mvke(MvkeConfig),
    TwoTower(TwoTowerConfig),
}

impl ModelConfig {
    pub fn mvke(schema: FieldSchema, routing: ExpertRouting) -> Self {
        ModelConfig::Mvke(MvkeConfig { schema, routing, hidden_dim: None, tau_init: default_tau() })
    }

    pub fn two_tower(schema: FieldSchema, task: TaskId) -> Self {
        ModelConfig::TwoTower(TwoTowerConfig { schema, task, hidden_dim: None, tau_init: default_tau() })
    }

    pub fn schema(&self) -> &FieldSchema {
        match self {
            ModelConfig::Mvke(c) => &c.schema,
            ModelConfig::TwoTower(c) => &c.schema,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        let (h, d) = match self {
            ModelConfig::Mvke(c) => (c.hidden_dim, c.schema.embed_dim),
            ModelConfig::TwoTower(c) => (c.hidden_dim, c.schema.embed_dim),
        };
        h.unwrap_or(2 * d)
    }

    pub fn tau_init(&self) -> f64 {
        match self {
            ModelConfig::Mvke(c) => c.tau_init,
            ModelConfig::TwoTower(c) => c.tau_init,
        }
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        match self {
            ModelConfig::Mvke(c) => c.routing.tasks(),
            ModelConfig::TwoTower(c) => vec![c.task],
        }
    }

    pub fn routing(&self) -> Option<&ExpertRouting> {
        match self {
            ModelConfig::Mvke(c) => Some(&c.routing),
            ModelConfig::TwoTower(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if let ModelConfig::Mvke(c) = self {
            c.routing.validate()?;
        }
        Ok(())
    }

    /// Everything except the expert-sharing rules.
    pub fn validate_structure(&self) -> Result<()> {
        self.schema().validate()?;
        if self.hidden_dim() == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !self.tau_init().is_finite() || self.tau_init() <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau_init())));
        }
        if let ModelConfig::Mvke(c) = self {
            c.routing.validate_structure()?;
        }
        Ok(())
    }
}
