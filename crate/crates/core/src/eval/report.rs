use std::path::Path;

use super::auc;
use crate::data::Dataset;
use crate::diffgraph::Scalar;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, TaskId};

/// Examples per forward pass when scoring a whole dataset.
pub const SCORE_BATCH: usize = 1024;

/// Predicted probability of every example for every task of the model.
pub fn score_dataset<F: Scalar>(model: &Model<F>, ds: &Dataset) -> Result<Vec<(TaskId, Vec<f64>)>> {
    let mut out: Vec<(TaskId, Vec<f64>)> = model.tasks().into_iter().map(|t| (t, Vec::with_capacity(ds.len()))).collect();
    for chunk in ds.examples.chunks(SCORE_BATCH) {
        let batch = Batch::<F>::new(model.schema(), chunk)?;
        for ((t, dst), (t2, p)) in out.iter_mut().zip(model.predict(&batch)?) {
            debug_assert_eq!(*t, t2);
            dst.extend(p.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: TaskId,
    pub auc: f64,
    pub examples: usize,
    pub positives: usize,
}

/// AUC per task of one model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub tasks: Vec<TaskScore>,
}

impl EvalReport {
    pub fn auc(&self, task: TaskId) -> Option<f64> {
        self.tasks.iter().find(|s| s.task == task).map(|s| s.auc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed,task,auc,examples,positives\n");
        for s in &self.tasks {
            out += &format!("{},{},{},{},{},{}\n", self.model, self.seed, s.task, s.auc, s.examples, s.positives);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores every task the model predicts. The conversion task is scored over
/// all impressions, matching the training loss.
pub fn evaluate<F: Scalar>(model: &Model<F>, ds: &Dataset, model_id: &str, seed: u64) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut tasks = Vec::new();
    for (task, scores) in score_dataset(model, ds)? {
        let labels = ds.labels(task);
        tasks.push(TaskScore {
            task,
            auc: auc(&scores, &labels)?,
            examples: labels.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
        });
    }
    Ok(EvalReport { model: model_id.to_string(), seed, tasks })
}
