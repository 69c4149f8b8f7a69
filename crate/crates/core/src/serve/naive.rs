use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cache::{build_caches, Invocations};
use super::topk::{assign_topk, rank, TagAssignment};
use crate::diffgraph::{Graph, Scalar};
use crate::error::{Error, Result};
use crate::model::{forward_task, two_tower_forward, Batch, Model, ModelConfig, TagSets, TaskId, UserFeatures};

/// Full forward of every (user, tag) pair: `[users][tags]` probabilities.
/// Both towers run once per pair, as a single-tower model would.
pub fn naive_scores<F: Scalar>(
    model: &Model<F>,
    users: &[(u32, Vec<Vec<u32>>)],
    tags: &[u32],
    task: TaskId,
) -> Result<(Vec<Vec<f64>>, Invocations)> {
    let schema = model.schema();
    let mut calls = Invocations::default();
    let mut out = Vec::with_capacity(users.len());
    if tags.is_empty() {
        return Ok((vec![Vec::new(); users.len()], calls));
    }
    let tag_sets = TagSets::singletons(schema, tags)?;
    for (_, fields) in users {
        let batch = Batch::<F> {
            users: UserFeatures::from_rows(schema, std::iter::repeat_n(fields.as_slice(), tags.len()))?,
            tags: tag_sets.clone(),
            click: vec![F::zero(); tags.len()],
            conv: vec![F::zero(); tags.len()],
        };
        let mut g = Graph::new(&model.params);
        let p = match &model.config {
            ModelConfig::Mvke(cfg) => forward_task(&mut g, cfg, &batch.users, &batch.tags, task)?.p,
            ModelConfig::TwoTower(cfg) if cfg.task == task => two_tower_forward(&mut g, cfg, &batch)?.p,
            ModelConfig::TwoTower(cfg) => return Err(Error::Config(format!("model predicts {}, not {task}", cfg.task))),
        };
        out.push(g.value(p).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect());
        calls.user_tower += tags.len();
        calls.tag_tower += tags.len();
    }
    Ok((out, calls))
}

/// Top-`n` tags per user from [`naive_scores`], same ordering rules as the
/// cached path.
pub fn naive_assign<F: Scalar>(
    model: &Model<F>,
    users: &[(u32, Vec<Vec<u32>>)],
    tags: &[u32],
    n: usize,
    task: TaskId,
) -> Result<(TagAssignment, Invocations)> {
    if n == 0 {
        return Err(Error::Usage("top-k size must be at least 1".into()));
    }
    let (scores, calls) = naive_scores(model, users, tags, task)?;
    let mut list: Vec<(u32, Vec<(u32, f64)>)> = users
        .iter()
        .zip(scores)
        .map(|((u, _), row)| {
            let mut scored: Vec<(u32, f64)> = tags.iter().copied().zip(row).collect();
            rank(&mut scored);
            scored.truncate(n.min(tags.len()));
            (*u, scored)
        })
        .collect();
    list.sort_by_key(|(u, _)| *u);
    Ok((TagAssignment { task, users: list }, calls))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_users: usize,
    pub n_tags: usize,
    pub n_tasks: usize,
    pub naive: Invocations,
    pub cached: Invocations,
    pub naive_ms: f64,
    pub cached_ms: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.naive_ms / self.cached_ms.max(1e-9)
    }
}

/// Random users drawn from the schema vocabularies.
pub fn synthetic_users(model_schema: &crate::model::FieldSchema, n: usize, seed: u64) -> Vec<(u32, Vec<Vec<u32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u32)
        .map(|u| (u, model_schema.user_fields.iter().map(|f| vec![rng.random_range(0..f.vocab as u32)]).collect()))
        .collect()
}

/// Times top-1 assignment for every task of the model by per-pair full
/// forwards and by the cached path, at each `(users, tags)` size.
pub fn bench<F: Scalar>(model: &Model<F>, sizes: &[(usize, usize)], seed: u64) -> Result<Vec<BenchRow>> {
    let tasks = model.tasks();
    let mut rows = Vec::with_capacity(sizes.len());
    for &(n_users, n_tags) in sizes {
        if n_tags > model.schema().tag_vocab {
            return Err(Error::Config(format!("bench asks for {n_tags} tags, vocabulary has {}", model.schema().tag_vocab)));
        }
        let users = synthetic_users(model.schema(), n_users, seed);
        let tags: Vec<u32> = (0..n_tags as u32).collect();

        let start = Instant::now();
        let mut naive = Invocations::default();
        let mut naive_out = Vec::new();
        for &t in &tasks {
            let (a, c) = naive_assign(model, &users, &tags, 1, t)?;
            naive.user_tower += c.user_tower;
            naive.tag_tower += c.tag_tower;
            naive_out.push(a);
        }
        let naive_ms = start.elapsed().as_secs_f64() * 1e3;

        let start = Instant::now();
        let (uc, tc, cached) = build_caches(model, &users, &tags)?;
        let cached_out = tasks.iter().map(|&t| assign_topk(&uc, &tc, 1, t)).collect::<Result<Vec<_>>>()?;
        let cached_ms = start.elapsed().as_secs_f64() * 1e3;
        if naive_out.iter().zip(&cached_out).any(|(a, b)| a.top1() != b.top1()) {
            log::warn!("naive and cached top-1 differ at {n_users} users x {n_tags} tags");
        }

        let row = BenchRow { n_users, n_tags, n_tasks: tasks.len(), naive, cached, naive_ms, cached_ms };
        log::info!("bench {n_users}x{n_tags}: naive {naive_ms:.1} ms, cached {cached_ms:.1} ms");
        rows.push(row);
    }
    Ok(rows)
}

/// Invocation counts only, so the file is identical across reruns.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "n_users,n_tags,n_tasks,naive_invocations,cached_invocations,cached_user_passes,cached_tag_passes,invocation_ratio\n",
    );
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{:.2}\n",
            r.n_users,
            r.n_tags,
            r.n_tasks,
            r.naive.user_tower,
            r.cached.total(),
            r.cached.user_tower,
            r.cached.tag_tower,
            r.naive.user_tower as f64 / r.cached.total() as f64
        );
    }
    out
}

/// Wall-clock timings, one line per size.
pub fn bench_timings(rows: &[BenchRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{}x{}: naive {:.3} ms, cached {:.3} ms, speedup {:.2}\n",
                r.n_users,
                r.n_tags,
                r.naive_ms,
                r.cached_ms,
                r.speedup()
            )
        })
        .collect()
}
