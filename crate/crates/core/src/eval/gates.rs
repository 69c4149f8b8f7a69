use std::path::Path;

use crate::diffgraph::{Graph, Scalar};
use crate::error::{Error, Result};
use crate::model::{gate_weights, tag_tower, Model, ModelConfig, TagSets, TaskId};

/// Gate weights of one tag for one task, indexed by expert; experts outside
/// the task's set are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub task: TaskId,
    pub tag: u32,
    pub weights: Vec<Option<f64>>,
}

impl GateRow {
    pub fn present(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    pub n_experts: usize,
    pub rows: Vec<GateRow>,
}

impl GateMatrix {
    pub fn rows_for(&self, task: TaskId) -> impl Iterator<Item = &GateRow> {
        self.rows.iter().filter(move |r| r.task == task)
    }

    /// Variance across tags of each expert's weight, averaged over the
    /// task's experts.
    pub fn across_tag_variance(&self, task: TaskId) -> f64 {
        let rows: Vec<Vec<f64>> = self.rows_for(task).map(GateRow::present).collect();
        if rows.len() < 2 {
            return 0.0;
        }
        let cols = rows[0].len();
        let n = rows.len() as f64;
        (0..cols)
            .map(|c| {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
                rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            / cols as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,tag_id");
        for e in 0..self.n_experts {
            out += &format!(",vke_{e}");
        }
        out.push('\n');
        for r in &self.rows {
            out += &format!("{},{}", r.task, r.tag);
            for w in &r.weights {
                out.push(',');
                if let Some(w) = w {
                    out += &w.to_string();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Gate weights of every listed tag, computed from the tag tower and the
/// kernels alone.
pub fn export_gate_weights<F: Scalar>(model: &Model<F>, tags: &[u32], tasks: &[TaskId]) -> Result<GateMatrix> {
    let ModelConfig::Mvke(cfg) = &model.config else {
        return Err(Error::Config("gate weights exist only for the mixture model".into()));
    };
    let k = cfg.routing.n_experts;
    let mut rows = Vec::new();
    if tags.is_empty() {
        return Ok(GateMatrix { n_experts: k, rows });
    }
    let sets = TagSets::singletons(&cfg.schema, tags)?;
    for &task in tasks {
        let set = cfg.routing.set(task);
        if set.is_empty() {
            return Err(Error::Config(format!("routing has no experts for {task}")));
        }
        let mut g = Graph::new(&model.params);
        let emb = tag_tower(&mut g, &sets, task)?;
        let w = gate_weights(&mut g, emb, task, set)?;
        for (i, &tag) in tags.iter().enumerate() {
            let mut weights = vec![None; k];
            for (j, &e) in set.iter().enumerate() {
                weights[e] = Some(g.value(w)[i * set.len() + j].to_f64().unwrap_or(f64::NAN));
            }
            rows.push(GateRow { task, tag, weights });
        }
    }
    Ok(GateMatrix { n_experts: k, rows })
}
