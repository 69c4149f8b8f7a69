//! Plain two-tower baseline: one independent model per task.

use super::batch::Batch;
use super::config::TwoTowerConfig;
use super::mvke::{embed_user_fields, mlp, score_pair, tag_tower, TaskOutput};
use crate::diffgraph::{Graph, Scalar, Var};
use crate::error::Result;

/// User embedding `[B×d]`: field embeddings averaged, then a two-layer MLP.
pub fn user_embedding<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &TwoTowerConfig,
    users: &super::batch::UserFeatures,
) -> Result<Var> {
    let fields = embed_user_fields(g, &cfg.schema, users)?;
    let pooled = g.mean_axis(fields, 1)?;
    mlp(g, pooled, "user.mlp")
}

pub fn two_tower_forward<F: Scalar>(g: &mut Graph<'_, F>, cfg: &TwoTowerConfig, batch: &Batch<F>) -> Result<TaskOutput> {
    let user = user_embedding(g, cfg, &batch.users)?;
    let tag = tag_tower(g, &batch.tags, cfg.task)?;
    let p = score_pair(g, user, tag, cfg.task)?;
    Ok(TaskOutput { p, gates: None })
}
