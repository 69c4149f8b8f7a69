use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, TaskId};
use super::names;
use crate::diffgraph::{ParamStore, Scalar, Tensor};
use crate::error::Result;

const EMBED_RANGE: f64 = 0.05;
const MAX_KERNEL_COS: f64 = 0.99;

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
}

impl Init {
    fn embedding(&mut self, name: String, rows: usize, d: usize) -> Result<()> {
        let data = (0..rows * d).map(|_| self.rng.random_range(-EMBED_RANGE..EMBED_RANGE)).collect();
        self.store.insert(name, Tensor::new(vec![rows, d], data)?)?;
        Ok(())
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-limit..limit)).collect();
        self.store.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)?;
        Ok(())
    }

    fn zeros(&mut self, name: String, n: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(vec![n]))?;
        Ok(())
    }

    fn affine(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.xavier(format!("{prefix}.{w}"), fan_in, fan_out)?;
        self.zeros(format!("{prefix}.{b}"), fan_out)
    }

    /// Unit-norm rows, resampled until all pairwise cosines are below 0.99.
    fn kernels(&mut self, k: usize, d: usize) -> Result<()> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        while rows.len() < k {
            let v: Vec<f64> = (0..d).map(|_| self.rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            let v: Vec<f64> = v.iter().map(|x| x / n).collect();
            let distinct =
                rows.iter().all(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < MAX_KERNEL_COS);
            if distinct {
                rows.push(v);
            }
        }
        self.store.insert(names::KERNELS, Tensor::new(vec![k, d], rows.concat())?)?;
        Ok(())
    }

    fn tag_tower(&mut self, task: TaskId, tag_vocab: usize, d: usize) -> Result<()> {
        self.embedding(names::tag_emb(task), tag_vocab, d)?;
        self.affine(&format!("{task}.tag"), "w", "b", d, d)
    }
}

/// Fresh parameters for `config`, deterministic in `seed` and independent of
/// the element type (values are drawn in f64 and rounded). Only structural
/// validity is required here; [`super::Model::init`] also enforces the
/// routing rules.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    config.validate_structure()?;
    let schema = config.schema();
    let d = schema.embed_dim;
    let h = config.hidden_dim();
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::new() };

    for (j, f) in schema.user_fields.iter().enumerate() {
        init.embedding(names::field(j), f.vocab, d)?;
    }
    match config {
        ModelConfig::Mvke(c) => {
            let k = c.routing.n_experts;
            init.kernels(k, d)?;
            for e in 0..k {
                let p = names::expert(e);
                init.affine(&p, "w_q", "b_q", d, d)?;
                init.affine(&p, "w_k", "b_k", d, d)?;
                init.affine(&p, "w_v", "b_v", d, d)?;
                init.affine(&format!("{p}.head"), "w1", "b1", d, h)?;
                init.affine(&format!("{p}.head"), "w2", "b2", h, d)?;
            }
            for task in c.routing.tasks() {
                init.tag_tower(task, schema.tag_vocab, d)?;
                init.affine(&format!("{task}.gate"), "w_q", "b_q", d, d)?;
                init.affine(&format!("{task}.gate"), "w_k", "b_k", d, d)?;
                init.store.insert(names::tau(task), Tensor::scalar(c.tau_init))?;
            }
        }
        ModelConfig::TwoTower(c) => {
            init.affine("user.mlp", "w1", "b1", d, h)?;
            init.affine("user.mlp", "w2", "b2", h, d)?;
            init.tag_tower(c.task, schema.tag_vocab, d)?;
            init.store.insert(names::tau(c.task), Tensor::scalar(c.tau_init))?;
        }
    }
    Ok(init.store.cast())
}
