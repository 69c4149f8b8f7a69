use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, OptimizerState, TaskMode, TrainConfig};
use crate::data::Dataset;
use crate::diffgraph::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::eval::{auc, score_dataset};
use crate::model::{forward_task, mvke_forward, two_tower_forward, Batch, Model, ModelConfig, TaskId};

/// Sum of the per-task mean BCE losses over every example of the batch.
/// Only the towers feeding `tasks` are recorded on the graph.
pub fn mtl_loss<F: Scalar>(g: &mut Graph<'_, F>, config: &ModelConfig, batch: &Batch<F>, tasks: &[TaskId]) -> Result<Var> {
    if tasks.is_empty() {
        return Err(Error::Config("no task selected for the loss".into()));
    }
    let mut probs = Vec::with_capacity(tasks.len());
    match config {
        ModelConfig::Mvke(c) => {
            if let Some(t) = tasks.iter().find(|t| c.routing.set(**t).is_empty()) {
                return Err(Error::Config(format!("routing has no experts for {t}")));
            }
            if tasks.len() == 1 {
                probs.push((tasks[0], forward_task(g, c, &batch.users, &batch.tags, tasks[0])?.p));
            } else {
                let out = mvke_forward(g, c, batch)?;
                for &t in tasks {
                    probs.push((t, out.get(t).expect("routing checked above").p));
                }
            }
        }
        ModelConfig::TwoTower(c) => {
            if tasks != [c.task] {
                return Err(Error::Config(format!("two-tower model for {} cannot train {tasks:?}", c.task)));
            }
            probs.push((c.task, two_tower_forward(g, c, batch)?.p));
        }
    }
    let mut total: Option<Var> = None;
    for (t, p) in probs {
        let l = g.bce(p, batch.labels(t))?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one task"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean of the batch losses.
    pub train_loss: f64,
    pub ctr_auc: Option<f64>,
    pub cvr_auc: Option<f64>,
}

impl EpochRecord {
    pub fn auc(&self, task: TaskId) -> Option<f64> {
        match task {
            TaskId::Ctr => self.ctr_auc,
            TaskId::Cvr => self.cvr_auc,
        }
    }

    fn selection_score(&self, tasks: &[TaskId]) -> f64 {
        let v: Vec<f64> = tasks.iter().filter_map(|&t| self.auc(t)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,ctr_auc,cvr_auc\n");
        for r in &self.records {
            out += &format!("{},{},{},{}\n", r.epoch, r.train_loss, cell(r.ctr_auc), cell(r.cvr_auc));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trains with Adam on shuffled minibatches, scoring `valid` after every
/// epoch, and returns the parameters of the epoch with the best mean
/// validation AUC over the trained tasks (earliest epoch on ties).
pub fn fit<F: Scalar>(mut model: Model<F>, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<(Model<F>, History)> {
    cfg.validate()?;
    let tasks = match cfg.task_mode {
        Some(m) => m.tasks(),
        None => model.tasks(),
    };
    TaskMode::for_tasks(&tasks)?;
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }

    let mut history = History::default();
    let mut best: Option<(f64, Model<F>)> = None;
    let mut state = OptimizerState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::<F>::new(model.schema(), chunk.iter().map(|&i| &train.examples[i]))?;
            let diverged = |e: Error| match e {
                Error::NonFinite(msg) => Error::Diverged { epoch, batch: b, msg },
                other => other,
            };
            let (loss, grads) = {
                let mut g = Graph::new(&model.params);
                let l = mtl_loss(&mut g, &model.config, &batch, &tasks).map_err(diverged)?;
                let loss = g.scalar(l).to_f64().unwrap_or(f64::NAN);
                (loss, g.backward(l).map_err(diverged)?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, msg: format!("loss {loss}") });
            }
            loss_sum += loss * chunk.len() as f64;
            model.params.accumulate(&grads);
            adam_step(&mut model.params, &mut state, cfg).map_err(diverged)?;
        }

        let mut record = EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, ctr_auc: None, cvr_auc: None };
        for (task, scores) in score_dataset(&model, valid)? {
            let a = auc(&scores, &valid.labels(task))?;
            match task {
                TaskId::Ctr => record.ctr_auc = Some(a),
                TaskId::Cvr => record.cvr_auc = Some(a),
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.5} ctr_auc {} cvr_auc {}",
            record.train_loss,
            fmt_auc(record.ctr_auc),
            fmt_auc(record.cvr_auc)
        );
        let score = record.selection_score(&tasks);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, model.clone()));
            history.best_epoch = epoch;
        }
        history.records.push(record);
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, history))
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
}
