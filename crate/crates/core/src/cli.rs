//! Command-line pipeline: data generation, training, evaluation, the expert
//! count sweep, gate export, cached prediction and the serving benchmark.
//!
//! Every subcommand resolves one [`RunConfig`] (built-in defaults, then the
//! `--config` file, then flags) and writes it to `<out>/config.json`, so a
//! run can be repeated by feeding that file back.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, files, read_dataset, read_json, write_dataset, write_json, DataSchema, Dataset, GeneratorConfig};
use crate::diffgraph::Scalar;
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_gate_weights, sensitivity_sweep, write_sweep_csv, SweepBase};
use crate::model::{Model, TaskId};
use crate::serve::{assign_topk, bench, bench_csv, bench_timings, build_caches, write_assignments_csv, write_caches};
use crate::train::{fit, Mode, Precision, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Mode,
    pub embed_dim: usize,
    pub n_experts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub tau_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { mode: Mode::MvkeMt, embed_dim: 16, n_experts: 5, hidden_dim: None, tau_init: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sweep_counts: Vec<usize>,
    /// Tags to export gate weights for; every tag when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_tags: Option<Vec<u32>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sweep_counts: (4..=10).collect(), gate_tags: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub topk: usize,
    /// `(users, tags)` pairs timed by `bench`.
    pub bench_sizes: Vec<(usize, usize)>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { topk: 5, bench_sizes: vec![(500, 100), (1000, 100), (2000, 100)] }
    }
}

/// The whole experiment in one document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the generator and training seeds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Share of the training file held out (from its end) to pick the best
    /// epoch; 0 selects on the training data itself.
    pub valid_fraction: f64,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!("valid_fraction must lie in [0, 1), got {}", self.valid_fraction)));
        }
        self.generator.validate()?;
        self.train.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `path.to.field=value`; the value is parsed as JSON and taken
    /// as a string when that fails.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {assignment}")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            let obj = slot
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("{path}: {key} is not inside an object")))?;
            slot = obj.entry(key.to_string()).or_insert(Value::Null);
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("--set {assignment}: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mvke", version, about = "Mixture of virtual-kernel experts for user tagging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long = "vke-count", global = true)]
    pub vke_count: Option<usize>,
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Override any configuration field, e.g. `--set train.epochs=3`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test logs, ground truth and schema.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write the best checkpoint with history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Test-set AUC per task into report.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate once per expert count into sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated expert counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Per-tag gate weights into weights.csv.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Build serving caches and write the top tags of every user.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Time per-pair forwards against the cached path into bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained model; freshly initialised parameters when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::ExportAttention { common, .. }
            | Command::Predict { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &common.sets {
        cfg.set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(seed) = cfg.seed {
        cfg.generator.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(m) = common.mode {
        cfg.model.mode = m;
    }
    if let Some(k) = common.vke_count {
        cfg.model.n_experts = k;
    }
    if let Some(n) = common.topk {
        cfg.serve.topk = n;
    }
    if let Some(p) = common.precision {
        cfg.train.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    execute(&cli.command)
}

pub fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = resolve(common)?;
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&cfg, &out.join("config.json"))?;
    match cmd {
        Command::GenData { .. } => gen_data(&cfg, out),
        Command::Train { data, .. } => match cfg.train.precision {
            Precision::F32 => train::<f32>(&cfg, data, out),
            Precision::F64 => train::<f64>(&cfg, data, out),
        },
        Command::Eval { checkpoint, data, .. } => match checkpoint_precision(checkpoint)? {
            Precision::F32 => eval::<f32>(&cfg, checkpoint, data, out),
            Precision::F64 => eval::<f64>(&cfg, checkpoint, data, out),
        },
        Command::Sweep { data, counts, .. } => {
            let counts = counts.clone().unwrap_or_else(|| cfg.eval.sweep_counts.clone());
            match cfg.train.precision {
                Precision::F32 => sweep::<f32>(&cfg, data, &counts, out),
                Precision::F64 => sweep::<f64>(&cfg, data, &counts, out),
            }
        }
        Command::ExportAttention { checkpoint, .. } => match checkpoint_precision(checkpoint)? {
            Precision::F32 => export_attention::<f32>(&cfg, checkpoint, out),
            Precision::F64 => export_attention::<f64>(&cfg, checkpoint, out),
        },
        Command::Predict { checkpoint, data, .. } => match checkpoint_precision(checkpoint)? {
            Precision::F32 => predict::<f32>(&cfg, checkpoint, data, out),
            Precision::F64 => predict::<f64>(&cfg, checkpoint, data, out),
        },
        Command::Bench { checkpoint, .. } => match checkpoint {
            Some(c) => match checkpoint_precision(c)? {
                Precision::F32 => run_bench(&cfg, Model::<f32>::load(c)?, out),
                Precision::F64 => run_bench(&cfg, Model::<f64>::load(c)?, out),
            },
            None => match cfg.train.precision {
                Precision::F32 => run_bench(&cfg, fresh_model::<f32>(&cfg)?, out),
                Precision::F64 => run_bench(&cfg, fresh_model::<f64>(&cfg)?, out),
            },
        },
    }
}

/// Precision a checkpoint was written in, from its first record.
fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    let path = dir.join("checkpoint.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let first = text.lines().next().ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let rec: Value = serde_json::from_str(first).map_err(|e| Error::DataLine { path: path.clone(), line: 1, msg: e.to_string() })?;
    match rec.get("dtype").and_then(Value::as_str) {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        other => Err(Error::DataLine { path, line: 1, msg: format!("unknown dtype {other:?}") }),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let g = data::generate(&cfg.generator)?;
    write_dataset(&g.train, &out.join(files::TRAIN))?;
    write_dataset(&g.test, &out.join(files::TEST))?;
    write_json(&g.truth, &out.join(files::TRUTH))?;
    write_json(&g.schema, &out.join(files::SCHEMA))?;
    for task in TaskId::ALL {
        log::info!("bayes {task} auc on test: {:.4}", data::bayes_auc(&g.truth, &g.test, task)?);
    }
    Ok(())
}

struct Loaded {
    schema: DataSchema,
    train: Dataset,
    test: Dataset,
}

fn load_data(dir: &Path) -> Result<Loaded> {
    Ok(Loaded {
        schema: read_json(&dir.join(files::SCHEMA))?,
        train: read_dataset(&dir.join(files::TRAIN))?,
        test: read_dataset(&dir.join(files::TEST))?,
    })
}

/// Splits the tail of `train` off as validation data.
pub fn holdout(train: &Dataset, fraction: f64) -> (Dataset, Dataset) {
    if fraction == 0.0 {
        return (train.clone(), train.clone());
    }
    let n_valid = ((train.len() as f64 * fraction).ceil() as usize).min(train.len());
    let cut = train.len() - n_valid;
    (Dataset::new(train.examples[..cut].to_vec()), Dataset::new(train.examples[cut..].to_vec()))
}

fn train<F: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let d = load_data(data)?;
    let m = &cfg.model;
    let model_cfg = m.mode.model_config(d.schema.with_embed_dim(m.embed_dim), m.n_experts, m.hidden_dim, m.tau_init)?;
    let model = Model::<F>::init(model_cfg, cfg.train.seed)?;
    let (fit_set, valid) = holdout(&d.train, cfg.valid_fraction);
    let (model, history) = fit(model, &fit_set, &valid, &cfg.train)?;
    log::info!("best epoch {}", history.best_epoch);
    model.save(out)?;
    history.write_csv(&out.join("history.csv"))
}

fn eval<F: Scalar>(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = Model::<F>::load(checkpoint)?;
    let test = read_dataset(&data.join(files::TEST))?;
    let id = model_id(&model);
    let report = evaluate(&model, &test, &id, cfg.train.seed)?;
    report.write_csv(&out.join("report.csv"))
}

fn model_id<F: Scalar>(model: &Model<F>) -> String {
    match &model.config {
        crate::model::ModelConfig::Mvke(c) => {
            let tasks: Vec<String> = c.routing.tasks().iter().map(ToString::to_string).collect();
            format!("mvke-k{}-{}", c.routing.n_experts, tasks.join("+"))
        }
        crate::model::ModelConfig::TwoTower(c) => format!("two-tower-{}", c.task),
    }
}

fn sweep<F: Scalar>(cfg: &RunConfig, data: &Path, counts: &[usize], out: &Path) -> Result<()> {
    let d = load_data(data)?;
    let (fit_set, valid) = holdout(&d.train, cfg.valid_fraction);
    let base = SweepBase {
        schema: d.schema.with_embed_dim(cfg.model.embed_dim),
        hidden_dim: cfg.model.hidden_dim,
        tau_init: cfg.model.tau_init,
        train: &fit_set,
        valid: &valid,
        test: &d.test,
        train_config: cfg.train.clone(),
    };
    let rows = sensitivity_sweep::<F>(counts, &base)?;
    write_sweep_csv(&rows, &out.join("sweep.csv"))
}

fn export_attention<F: Scalar>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = Model::<F>::load(checkpoint)?;
    let tags = cfg.eval.gate_tags.clone().unwrap_or_else(|| (0..model.schema().tag_vocab as u32).collect());
    let gm = export_gate_weights(&model, &tags, &model.tasks())?;
    gm.write_csv(&out.join("weights.csv"))
}

fn predict<F: Scalar>(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    if cfg.serve.topk == 0 {
        return Err(Error::Usage("--topk must be at least 1".into()));
    }
    let model = Model::<F>::load(checkpoint)?;
    let d = load_data(data)?;
    let mut all = d.train.examples;
    all.extend(d.test.examples);
    let users = Dataset::new(all).users();
    let tags: Vec<u32> = (0..model.schema().tag_vocab as u32).collect();
    let (uc, tc, calls) = build_caches(&model, &users, &tags)?;
    log::info!("cached {} users and {} tags with {} user and {} tag passes", uc.len(), tags.len(), calls.user_tower, calls.tag_tower);
    write_caches(&out.join("caches"), &uc, &tc)?;
    let list = model.tasks().into_iter().map(|t| assign_topk(&uc, &tc, cfg.serve.topk, t)).collect::<Result<Vec<_>>>()?;
    write_assignments_csv(&list, &out.join("assignments.csv"))
}

fn fresh_model<F: Scalar>(cfg: &RunConfig) -> Result<Model<F>> {
    let g = &cfg.generator;
    let schema = crate::model::FieldSchema {
        user_fields: (0..g.n_fields).map(|j| crate::model::FieldSpec { name: format!("field_{j}"), vocab: g.field_vocab }).collect(),
        tag_vocab: g.n_tags,
        embed_dim: cfg.model.embed_dim,
    };
    let m = &cfg.model;
    Model::init(m.mode.model_config(schema, m.n_experts, m.hidden_dim, m.tau_init)?, cfg.train.seed)
}

fn run_bench<F: Scalar>(cfg: &RunConfig, model: Model<F>, out: &Path) -> Result<()> {
    let rows = bench(&model, &cfg.serve.bench_sizes, cfg.train.seed)?;
    let log_path = out.join("bench.log");
    std::fs::write(&log_path, bench_timings(&rows)).map_err(|e| Error::io(&log_path, e))?;
    let path = out.join("bench.csv");
    std::fs::write(&path, bench_csv(&rows)).map_err(|e| Error::io(&path, e))
}
