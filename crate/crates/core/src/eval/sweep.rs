use std::path::Path;

use super::evaluate;
use crate::data::Dataset;
use crate::diffgraph::Scalar;
use crate::error::{Error, Result};
use crate::model::{ExpertRouting, FieldSchema, Model, ModelConfig, TaskId};
use crate::train::{fit, TrainConfig};

/// Everything a sweep holds fixed while the expert count varies.
#[derive(Clone, Debug)]
pub struct SweepBase<'a> {
    pub schema: FieldSchema,
    pub hidden_dim: Option<usize>,
    pub tau_init: f64,
    pub train: &'a Dataset,
    pub valid: &'a Dataset,
    pub test: &'a Dataset,
    pub train_config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_experts: usize,
    pub ctr_auc: f64,
    pub cvr_auc: f64,
}

/// The joint model with the automatic expert split for `k` experts.
pub fn sweep_model_config(base: &SweepBase<'_>, k: usize) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::mvke(base.schema.clone(), ExpertRouting::auto_split(k)?);
    if let ModelConfig::Mvke(c) = &mut cfg {
        c.hidden_dim = base.hidden_dim;
        c.tau_init = base.tau_init;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One train and test evaluation per expert count, all from the same seed,
/// run in the order given.
pub fn sensitivity_sweep<F: Scalar>(counts: &[usize], base: &SweepBase<'_>) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(Error::Config("sweep needs at least one expert count".into()));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &k in counts {
        let seed = base.train_config.seed;
        let model = Model::<F>::init(sweep_model_config(base, k)?, seed)?;
        let (model, _) = fit(model, base.train, base.valid, &base.train_config)?;
        let report = evaluate(&model, base.test, &format!("mvke-mt-k{k}"), seed)?;
        let get = |t| report.auc(t).ok_or_else(|| Error::Config(format!("sweep model lacks {t}")));
        let row = SweepRow { n_experts: k, ctr_auc: get(TaskId::Ctr)?, cvr_auc: get(TaskId::Cvr)? };
        log::info!("sweep k={k}: ctr {:.4} cvr {:.4}", row.ctr_auc, row.cvr_auc);
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n_experts,ctr_auc,cvr_auc\n");
    for r in rows {
        out += &format!("{},{},{}\n", r.n_experts, r.ctr_auc, r.cvr_auc);
    }
    out
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}
