use std::collections::HashMap;

use crate::diffgraph::{cosine_parts, sigmoid, Graph, Scalar};
use crate::error::{Error, Result};
use crate::model::{gate_weights, names, tag_tower, user_embedding, user_tower, Model, ModelConfig, TagSets, TaskId, UserFeatures};

/// Users pushed through the user tower per graph.
const USER_CHUNK: usize = 512;

/// Every expert output of every user: `k` vectors of width `d` per user,
/// rows ordered by ascending user id.
#[derive(Clone, Debug, PartialEq)]
pub struct UserCache<F> {
    pub k: usize,
    pub d: usize,
    pub user_ids: Vec<u32>,
    pub values: Vec<F>,
    index: HashMap<u32, usize>,
}

impl<F: Scalar> UserCache<F> {
    pub fn new(k: usize, d: usize, user_ids: Vec<u32>, values: Vec<F>) -> Result<Self> {
        if values.len() != k * d * user_ids.len() {
            return Err(Error::Data(format!(
                "user cache holds {} values, expected {k}x{d}x{}",
                values.len(),
                user_ids.len()
            )));
        }
        let index = index_of(&user_ids, "user")?;
        Ok(UserCache { k, d, user_ids, values, index })
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn stored_vectors(&self) -> usize {
        self.values.len() / self.d.max(1)
    }

    fn row(&self, user: u32) -> Result<usize> {
        self.index.get(&user).copied().ok_or_else(|| Error::Lookup(format!("user {user} is not cached")))
    }

    /// Output of `expert` for the user at cache row `row`.
    pub fn vector(&self, row: usize, expert: usize) -> &[F] {
        let at = (row * self.k + expert) * self.d;
        &self.values[at..at + self.d]
    }

    pub fn vectors(&self, user: u32) -> Result<Vec<&[F]>> {
        let row = self.row(user)?;
        Ok((0..self.k).map(|e| self.vector(row, e)).collect())
    }
}

/// Per-task tag embeddings and gate weights over the task's experts, rows
/// ordered by ascending tag id.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTags<F> {
    pub task: TaskId,
    pub experts: Vec<usize>,
    pub tau: F,
    pub d: usize,
    pub tag_ids: Vec<u32>,
    /// `[n_tags × d]`.
    pub embeddings: Vec<F>,
    /// `[n_tags × experts.len()]`.
    pub weights: Vec<F>,
    index: HashMap<u32, usize>,
}

impl<F: Scalar> TaskTags<F> {
    pub fn new(
        task: TaskId,
        experts: Vec<usize>,
        tau: F,
        d: usize,
        tag_ids: Vec<u32>,
        embeddings: Vec<F>,
        weights: Vec<F>,
    ) -> Result<Self> {
        let n = tag_ids.len();
        if embeddings.len() != n * d || weights.len() != n * experts.len() {
            return Err(Error::Data(format!("{task} tag cache sizes do not match {n} tags")));
        }
        let index = index_of(&tag_ids, "tag")?;
        Ok(TaskTags { task, experts, tau, d, tag_ids, embeddings, weights, index })
    }

    pub fn len(&self) -> usize {
        self.tag_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tag_ids.is_empty()
    }

    fn row(&self, tag: u32) -> Result<usize> {
        self.index.get(&tag).copied().ok_or_else(|| Error::Lookup(format!("tag {tag} is not cached for {}", self.task)))
    }

    pub fn embedding(&self, row: usize) -> &[F] {
        &self.embeddings[row * self.d..(row + 1) * self.d]
    }

    pub fn gate(&self, row: usize) -> &[F] {
        let n = self.experts.len();
        &self.weights[row * n..(row + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TagCache<F> {
    pub tasks: Vec<TaskTags<F>>,
}

impl<F: Scalar> TagCache<F> {
    pub fn task(&self, task: TaskId) -> Result<&TaskTags<F>> {
        self.tasks.iter().find(|t| t.task == task).ok_or_else(|| Error::Lookup(format!("no tag cache for {task}")))
    }
}

/// Tower passes performed; one pass processes one user or one tag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Invocations {
    pub user_tower: usize,
    pub tag_tower: usize,
}

impl Invocations {
    pub fn total(&self) -> usize {
        self.user_tower + self.tag_tower
    }
}

fn index_of(ids: &[u32], what: &str) -> Result<HashMap<u32, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        if index.insert(id, i).is_some() {
            return Err(Error::Data(format!("duplicate {what} id {id}")));
        }
    }
    Ok(index)
}

fn sorted_unique<T: Clone, K: Ord + Copy + std::fmt::Display>(items: &[T], key: impl Fn(&T) -> K, what: &str) -> Result<Vec<T>> {
    let mut v = items.to_vec();
    v.sort_by_key(|x| key(x));
    if let Some(w) = v.windows(2).find(|w| key(&w[0]) == key(&w[1])) {
        return Err(Error::Data(format!("duplicate {what} id {}", key(&w[0]))));
    }
    Ok(v)
}

/// Runs the user tower once per user and the tag tower plus gate once per
/// tag and task. A two-tower model is cached as a single expert with unit
/// gate weight.
pub fn build_caches<F: Scalar>(
    model: &Model<F>,
    users: &[(u32, Vec<Vec<u32>>)],
    tags: &[u32],
) -> Result<(UserCache<F>, TagCache<F>, Invocations)> {
    let schema = model.schema();
    let d = schema.embed_dim;
    let k = model.config.routing().map_or(1, |r| r.n_experts);
    let users = sorted_unique(users, |u| u.0, "user")?;
    let tags = sorted_unique(tags, |&t| t, "tag")?;
    let mut calls = Invocations::default();

    let mut values = vec![F::zero(); users.len() * k * d];
    for (c, chunk) in users.chunks(USER_CHUNK).enumerate() {
        let feats = UserFeatures::from_rows(schema, chunk.iter().map(|u| u.1.as_slice()))?;
        let mut g = Graph::new(&model.params);
        let outs = match &model.config {
            ModelConfig::Mvke(cfg) => user_tower(&mut g, cfg, &feats, &(0..k).collect::<Vec<_>>())?,
            ModelConfig::TwoTower(cfg) => vec![(0, user_embedding(&mut g, cfg, &feats)?)],
        };
        for (i, _) in chunk.iter().enumerate() {
            let row = c * USER_CHUNK + i;
            for &(e, v) in &outs {
                let at = (row * k + e) * d;
                values[at..at + d].copy_from_slice(&g.value(v)[i * d..(i + 1) * d]);
            }
        }
        calls.user_tower += chunk.len();
    }
    let user_cache = UserCache::new(k, d, users.iter().map(|u| u.0).collect(), values)?;

    let mut tag_cache = TagCache::default();
    for task in model.tasks() {
        let experts = match model.config.routing() {
            Some(r) => r.set(task).to_vec(),
            None => vec![0],
        };
        let tau = model.params.by_name(&names::tau(task))?.data()[0];
        let (embeddings, weights) = if tags.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let sets = TagSets::singletons(schema, &tags)?;
            let mut g = Graph::new(&model.params);
            let emb = tag_tower(&mut g, &sets, task)?;
            let weights = match &model.config {
                ModelConfig::Mvke(_) => {
                    let w = gate_weights(&mut g, emb, task, &experts)?;
                    g.value(w).to_vec()
                }
                ModelConfig::TwoTower(_) => vec![F::one(); tags.len()],
            };
            (g.value(emb).to_vec(), weights)
        };
        calls.tag_tower += tags.len();
        tag_cache.tasks.push(TaskTags::new(task, experts, tau, d, tags.clone(), embeddings, weights)?);
    }
    Ok((user_cache, tag_cache, calls))
}

/// Mixes the cached expert outputs with the cached gate weights of the tag
/// and scores the pair; no tower is evaluated.
pub fn score_from_cache<F: Scalar>(users: &UserCache<F>, tags: &TagCache<F>, user: u32, tag: u32, task: TaskId) -> Result<F> {
    let tt = tags.task(task)?;
    let (u, t) = (users.row(user)?, tt.row(tag)?);
    Ok(score_rows(users, tt, u, t, &mut vec![F::zero(); users.d]))
}

pub(crate) fn score_rows<F: Scalar>(users: &UserCache<F>, tt: &TaskTags<F>, u: usize, t: usize, mixed: &mut [F]) -> F {
    mixed.iter_mut().for_each(|m| *m = F::zero());
    for (&e, &w) in tt.experts.iter().zip(tt.gate(t)) {
        for (m, &x) in mixed.iter_mut().zip(users.vector(u, e)) {
            *m += w * x;
        }
    }
    sigmoid(tt.tau * cosine_parts(mixed, tt.embedding(t)).cos)
}
