//! MVKE architecture and the two-tower baseline as pure forward functions
//! over a [`ParamStore`].

mod batch;
mod config;
mod init;
mod mvke;
mod two_tower;

use std::path::Path;

pub use batch::{Batch, RaggedIds, TagSets, UserFeatures};
pub use config::{ExpertRouting, FieldSchema, FieldSpec, ModelConfig, MvkeConfig, TaskId, TwoTowerConfig};
pub use init::init_params;
pub use mvke::{
    embed_user_fields, forward_task, gate_weights, mvke_forward, score_pair, tag_tower, user_tower, vke_forward,
    vkg_combine, Predictions, TaskOutput,
};
pub use two_tower::{two_tower_forward, user_embedding};

use crate::diffgraph::{Graph, ParamStore, Scalar};
use crate::error::{Error, Result};

/// Parameter naming. The first path segment names the owning module.
pub mod names {
    use super::TaskId;

    pub const KERNELS: &str = "vk";

    pub fn field(j: usize) -> String {
        format!("user.field.{j}")
    }

    pub fn expert(e: usize) -> String {
        format!("vke.{e}")
    }

    pub fn tag_emb(task: TaskId) -> String {
        format!("{task}.tag.emb")
    }

    pub fn tau(task: TaskId) -> String {
        format!("{task}.tau")
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.config.tasks()
    }

    pub fn schema(&self) -> &FieldSchema {
        self.config.schema()
    }

    /// Records the forward pass of every enabled task on `g`, which must be
    /// built over `self.params`.
    pub fn forward(&self, g: &mut Graph<'_, F>, batch: &Batch<F>) -> Result<Predictions> {
        match &self.config {
            ModelConfig::Mvke(c) => mvke_forward(g, c, batch),
            ModelConfig::TwoTower(c) => {
                let mut p = Predictions::default();
                p.set(c.task, two_tower_forward(g, c, batch)?);
                Ok(p)
            }
        }
    }

    /// Forward without gradients: per-task probabilities.
    pub fn predict(&self, batch: &Batch<F>) -> Result<Vec<(TaskId, Vec<F>)>> {
        let mut g = Graph::new(&self.params);
        let preds = self.forward(&mut g, batch)?;
        Ok(self
            .tasks()
            .into_iter()
            .filter_map(|t| preds.get(t).map(|o| (t, g.value(o.p).to_vec())))
            .collect())
    }

    /// Writes `model.json` and `checkpoint.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("model.json");
        let text = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg, text + "\n").map_err(|e| Error::io(&cfg, e))?;
        self.params.write_checkpoint(&dir.join("checkpoint.jsonl"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join("model.json");
        let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        let params = ParamStore::read_checkpoint(&dir.join("checkpoint.jsonl"))?;
        let expected = init_params::<F>(&config, 0)?;
        for p in expected.iter() {
            let got = params.by_name(&p.name)?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} has shape {:?}, config implies {:?}",
                    p.name,
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if expected.len() != params.len() {
            return Err(Error::Config("checkpoint holds parameters the config does not use".into()));
        }
        Ok(Model { config, params })
    }
}
