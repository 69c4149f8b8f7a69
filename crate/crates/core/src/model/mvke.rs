//! Forward pass of the Mixture of Virtual-Kernel Experts.
//!
//! Each expert attends over the user's field embeddings with its own virtual
//! kernel as the query. Each task's gate attends from the tag embedding over
//! the virtual kernels of that task's experts and mixes the expert outputs
//! with the resulting weights. The gate never sees user features, so its
//! weights can be cached per tag at serving time.

use super::batch::{Batch, TagSets, UserFeatures};
use super::config::{FieldSchema, MvkeConfig, TaskId};
use super::names;
use crate::diffgraph::{attention_weights, scaled_dot_attention, Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Output of one task head.
#[derive(Clone, Copy, Debug)]
pub struct TaskOutput {
    /// Probabilities `[B]`.
    pub p: Var,
    /// Gate weights `[B×|K_task|]`; absent for the two-tower baseline.
    pub gates: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Predictions {
    pub ctr: Option<TaskOutput>,
    pub cvr: Option<TaskOutput>,
}

impl Predictions {
    pub fn get(&self, task: TaskId) -> Option<TaskOutput> {
        match task {
            TaskId::Ctr => self.ctr,
            TaskId::Cvr => self.cvr,
        }
    }

    pub(crate) fn set(&mut self, task: TaskId, out: TaskOutput) {
        match task {
            TaskId::Ctr => self.ctr = Some(out),
            TaskId::Cvr => self.cvr = Some(out),
        }
    }
}

/// Field embeddings `[B×m×d]`; multi-valued fields are mean-pooled.
pub fn embed_user_fields<F: Scalar>(g: &mut Graph<'_, F>, schema: &FieldSchema, users: &UserFeatures) -> Result<Var> {
    let b = users.len();
    let d = schema.embed_dim;
    let mut rows = Vec::with_capacity(schema.n_fields());
    for (j, ids) in users.fields.iter().enumerate() {
        let table = g.param(&names::field(j))?;
        let mut x = g.gather(table, &ids.rows)?;
        if !ids.all_single() {
            x = g.segment_mean(x, &ids.offsets)?;
        }
        rows.push(g.reshape(x, &[b, 1, d])?);
    }
    g.concat(&rows, 1)
}

/// Tag embedding `[B×d]`: mean of the task's tag rows, then affine + tanh.
pub fn tag_tower<F: Scalar>(g: &mut Graph<'_, F>, tags: &TagSets, task: TaskId) -> Result<Var> {
    let table = g.param(&names::tag_emb(task))?;
    let mut x = g.gather(table, &tags.0.rows)?;
    if !tags.0.all_single() {
        x = g.segment_mean(x, &tags.0.offsets)?;
    }
    let w = g.param(&format!("{task}.tag.w"))?;
    let bias = g.param(&format!("{task}.tag.b"))?;
    let h = g.affine(x, w, bias)?;
    g.tanh(h)
}

fn dense_tanh<F: Scalar>(g: &mut Graph<'_, F>, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.{w}"))?;
    let b = g.param(&format!("{prefix}.{b}"))?;
    let h = g.affine(x, w, b)?;
    g.tanh(h)
}

/// `relu(x·W1 + b1)·W2 + b2`.
pub(crate) fn mlp<F: Scalar>(g: &mut Graph<'_, F>, x: Var, prefix: &str) -> Result<Var> {
    let (w1, b1) = (g.param(&format!("{prefix}.w1"))?, g.param(&format!("{prefix}.b1"))?);
    let (w2, b2) = (g.param(&format!("{prefix}.w2"))?, g.param(&format!("{prefix}.b2"))?);
    let h = g.affine(x, w1, b1)?;
    let h = g.relu(h)?;
    g.affine(h, w2, b2)
}

/// Output `[B×d]` of expert `expert` given field embeddings `[B×m×d]`.
pub fn vke_forward<F: Scalar>(g: &mut Graph<'_, F>, fields: Var, expert: usize) -> Result<Var> {
    let (b, m, d) = match *g.shape(fields) {
        [b, m, d] => (b, m, d),
        ref s => return Err(Error::shape("vke_forward", format!("field embeddings {s:?}"))),
    };
    let kernels = g.param(names::KERNELS)?;
    let k = g.shape(kernels)[0];
    if expert >= k {
        return Err(Error::Config(format!("expert {expert} out of range for {k} experts")));
    }
    let p = names::expert(expert);
    let kernel = g.gather(kernels, &[expert])?;
    let q = dense_tanh(g, kernel, &p, "w_q", "b_q")?;
    let q = g.reshape(q, &[1, 1, d])?;
    let q = g.broadcast(q, b)?;
    let q = g.reshape(q, &[b, 1, d])?;

    let flat = g.reshape(fields, &[b * m, d])?;
    let keys = dense_tanh(g, flat, &p, "w_k", "b_k")?;
    let keys = g.reshape(keys, &[b, m, d])?;
    let values = dense_tanh(g, flat, &p, "w_v", "b_v")?;
    let values = g.reshape(values, &[b, m, d])?;

    let (ctx, _) = scaled_dot_attention(g, q, keys, values)?;
    let ctx = g.reshape(ctx, &[b, d])?;
    mlp(g, ctx, &format!("{p}.head"))
}

/// Gate weights `[B×|set|]` of `task` for tag embeddings `[B×d]`.
pub fn gate_weights<F: Scalar>(g: &mut Graph<'_, F>, tag_emb: Var, task: TaskId, set: &[usize]) -> Result<Var> {
    if set.is_empty() {
        return Err(Error::Config(format!("{task} has no experts")));
    }
    let (b, d) = match *g.shape(tag_emb) {
        [b, d] => (b, d),
        ref s => return Err(Error::shape("gate_weights", format!("tag embedding {s:?}"))),
    };
    let prefix = format!("{task}.gate");
    let q = dense_tanh(g, tag_emb, &prefix, "w_q", "b_q")?;
    let q = g.reshape(q, &[b, 1, d])?;
    let kernels = g.param(names::KERNELS)?;
    let kernels = g.gather(kernels, set)?;
    let keys = dense_tanh(g, kernels, &prefix, "w_k", "b_k")?;
    let keys = g.broadcast(keys, b)?;
    let w = attention_weights(g, q, keys)?;
    g.reshape(w, &[b, set.len()])
}

/// Mixes the task's expert outputs (each `[B×d]`, ascending expert order)
/// with tag-conditioned gate weights. Returns the user embedding `[B×d]` and
/// the weights `[B×|set|]`.
pub fn vkg_combine<F: Scalar>(
    g: &mut Graph<'_, F>,
    expert_outputs: &[Var],
    tag_emb: Var,
    task: TaskId,
    set: &[usize],
) -> Result<(Var, Var)> {
    if expert_outputs.len() != set.len() {
        return Err(Error::Config(format!("{} expert outputs for a set of {}", expert_outputs.len(), set.len())));
    }
    let w = gate_weights(g, tag_emb, task, set)?;
    let (b, d) = (g.shape(tag_emb)[0], g.shape(tag_emb)[1]);
    let stacked: Vec<Var> =
        expert_outputs.iter().map(|&e| g.reshape(e, &[b, 1, d])).collect::<Result<_>>()?;
    let values = g.concat(&stacked, 1)?;
    let w3 = g.reshape(w, &[b, 1, set.len()])?;
    let mixed = g.bmm(w3, values, false)?;
    let mixed = g.reshape(mixed, &[b, d])?;
    Ok((mixed, w))
}

/// `sigmoid(τ_task · cos(E_u, E_T))`, one value per row.
pub fn score_pair<F: Scalar>(g: &mut Graph<'_, F>, user_emb: Var, tag_emb: Var, task: TaskId) -> Result<Var> {
    let c = g.cosine(user_emb, tag_emb)?;
    let tau = g.param(&names::tau(task))?;
    let z = g.mul_scalar(c, tau)?;
    g.sigmoid(z)
}

/// Every expert used by the routing, computed once: `(expert, [B×d])`.
pub fn user_tower<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &MvkeConfig,
    users: &UserFeatures,
    experts: &[usize],
) -> Result<Vec<(usize, Var)>> {
    let fields = embed_user_fields(g, &cfg.schema, users)?;
    experts.iter().map(|&e| Ok((e, vke_forward(g, fields, e)?))).collect()
}

fn task_head<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &MvkeConfig,
    experts: &[(usize, Var)],
    tags: &TagSets,
    task: TaskId,
) -> Result<TaskOutput> {
    let set = cfg.routing.set(task);
    let outs: Vec<Var> = set
        .iter()
        .map(|e| {
            experts
                .iter()
                .find(|(i, _)| i == e)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Config(format!("expert {e} was not computed")))
        })
        .collect::<Result<_>>()?;
    let tag_emb = tag_tower(g, tags, task)?;
    let (user_emb, w) = vkg_combine(g, &outs, tag_emb, task, set)?;
    let p = score_pair(g, user_emb, tag_emb, task)?;
    Ok(TaskOutput { p, gates: Some(w) })
}

/// Joint forward over every enabled task. Experts are evaluated once and
/// shared by the task heads.
pub fn mvke_forward<F: Scalar>(g: &mut Graph<'_, F>, cfg: &MvkeConfig, batch: &Batch<F>) -> Result<Predictions> {
    let experts = user_tower(g, cfg, &batch.users, &cfg.routing.used())?;
    let mut out = Predictions::default();
    for task in cfg.routing.tasks() {
        out.set(task, task_head(g, cfg, &experts, &batch.tags, task)?);
    }
    Ok(out)
}

/// Forward of a single task, touching only that task's experts.
pub fn forward_task<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &MvkeConfig,
    users: &UserFeatures,
    tags: &TagSets,
    task: TaskId,
) -> Result<TaskOutput> {
    let experts = user_tower(g, cfg, users, cfg.routing.set(task))?;
    task_head(g, cfg, &experts, tags, task)
}
