use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::diffgraph::sigmoid;
use crate::error::{Error, Result};
use crate::model::{FieldSchema, FieldSpec, TaskId};

/// Synthetic log generator settings.
///
/// Positives are clicked impressions drawn from a uniform user x ad exposure
/// stream; negatives are uniformly sampled (user, ad) pairs labelled
/// (0, 0), `negative_ratio` of them per positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_tags: usize,
    pub n_ads: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    /// Standard deviation of each user latent coordinate.
    pub latent_scale: f64,
    /// Correlation between a user's click and conversion latents.
    pub affinity_corr: f64,
    pub negative_ratio: f64,
    pub click_offset: f64,
    pub conv_offset: f64,
    pub n_fields: usize,
    pub field_vocab: usize,
    /// Noise added to the latent before a field is quantised, relative to
    /// `latent_scale`.
    pub field_noise: f64,
    pub max_ad_tags: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_users: 10_000,
            n_tags: 100,
            n_ads: 2_000,
            n_train: 200_000,
            n_test: 40_000,
            latent_dim: 4,
            latent_scale: 1.5,
            affinity_corr: 0.5,
            negative_ratio: 1.5,
            click_offset: -2.0,
            conv_offset: -2.5,
            n_fields: 6,
            field_vocab: 256,
            field_noise: 0.3,
            max_ad_tags: 3,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_tags", self.n_tags),
            ("n_ads", self.n_ads),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("latent_dim", self.latent_dim),
            ("n_fields", self.n_fields),
            ("field_vocab", self.field_vocab),
            ("max_ad_tags", self.max_ad_tags),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator {name} must be positive")));
        }
        if self.max_ad_tags > self.n_tags {
            return Err(Error::Config("max_ad_tags exceeds n_tags".into()));
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return Err(Error::Config(format!("negative_ratio must be >= 0, got {}", self.negative_ratio)));
        }
        if !(-1.0..=1.0).contains(&self.affinity_corr) {
            return Err(Error::Config("affinity_corr must lie in [-1, 1]".into()));
        }
        for (name, v) in [("latent_scale", self.latent_scale), ("field_noise", self.field_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.click_offset.is_finite() || !self.conv_offset.is_finite() {
            return Err(Error::Config("offsets must be finite".into()));
        }
        Ok(())
    }

    /// Positives per split, the rest of the split being sampled negatives.
    pub fn positives(&self, n: usize) -> usize {
        ((n as f64 / (1.0 + self.negative_ratio)).round() as usize).min(n)
    }
}

/// Categorical vocabularies of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSchema {
    pub user_fields: Vec<FieldSpec>,
    pub tag_vocab: usize,
}

impl DataSchema {
    pub fn with_embed_dim(&self, embed_dim: usize) -> FieldSchema {
        FieldSchema { user_fields: self.user_fields.clone(), tag_vocab: self.tag_vocab, embed_dim }
    }
}

/// The preference model labels were drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub latent_dim: usize,
    pub click_offset: f64,
    pub conv_offset: f64,
    /// Row-major [n_users, latent_dim].
    pub user_click: Vec<f64>,
    pub user_conv: Vec<f64>,
    /// Row-major [n_tags, latent_dim].
    pub tag_topics: Vec<f64>,
    pub ad_tags: Vec<Vec<u32>>,
    pub user_fields: Vec<Vec<Vec<u32>>>,
    /// Positives per sampled negative divided by the mean click probability
    /// of the exposure stream; turns a click probability into the
    /// probability a record of the mixed dataset carries a click.
    pub posterior_scale: f64,
}

impl GroundTruth {
    pub fn n_users(&self) -> usize {
        self.user_fields.len()
    }

    fn row<'a>(&self, v: &'a [f64], i: usize) -> &'a [f64] {
        &v[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    fn ad_vector(&self, ad: usize) -> Vec<f64> {
        let tags = &self.ad_tags[ad];
        let mut out = vec![0.0; self.latent_dim];
        for &t in tags {
            for (o, x) in out.iter_mut().zip(self.row(&self.tag_topics, t as usize)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= tags.len() as f64);
        out
    }

    fn check(&self, user: u32, ad: u32) -> Result<()> {
        if user as usize >= self.n_users() || ad as usize >= self.ad_tags.len() {
            return Err(Error::Lookup(format!("no ground truth for user {user}, ad {ad}")));
        }
        Ok(())
    }

    fn logit(&self, latents: &[f64], user: usize, ad: &[f64], offset: f64) -> f64 {
        self.row(latents, user).iter().zip(ad).map(|(u, a)| u * a).sum::<f64>() + offset
    }

    /// Click probability of an exposure.
    pub fn p_click(&self, user: u32, ad: u32) -> Result<f64> {
        self.check(user, ad)?;
        let a = self.ad_vector(ad as usize);
        Ok(sigmoid(self.logit(&self.user_click, user as usize, &a, self.click_offset)))
    }

    /// Conversion probability given a click.
    pub fn p_conv_given_click(&self, user: u32, ad: u32) -> Result<f64> {
        self.check(user, ad)?;
        let a = self.ad_vector(ad as usize);
        Ok(sigmoid(self.logit(&self.user_conv, user as usize, &a, self.conv_offset)))
    }

    /// Probability that a dataset record for (user, ad) carries a positive
    /// label for `task`, accounting for the positive/negative mixture.
    pub fn label_probability(&self, user: u32, ad: u32, task: TaskId) -> Result<f64> {
        let pc = self.p_click(user, ad)?;
        let click = self.posterior_scale * pc / (self.posterior_scale * pc + 1.0);
        Ok(match task {
            TaskId::Ctr => click,
            TaskId::Cvr => click * self.p_conv_given_click(user, ad)?,
        })
    }
}

pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: GroundTruth,
    pub schema: DataSchema,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Indices of the `count` codebook rows nearest to `x`, nearest first.
fn nearest(codebook: &[f64], dim: usize, x: &[f64], count: usize) -> Vec<u32> {
    let mut dist: Vec<(f64, u32)> = codebook
        .chunks(dim)
        .enumerate()
        .map(|(i, c)| (c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i as u32))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut ids: Vec<u32> = dist.iter().take(count).map(|d| d.1).collect();
    ids.sort_unstable();
    ids
}

/// Which slice of the joint [click; conversion] latent a field observes.
fn field_view(j: usize, l: usize) -> std::ops::Range<usize> {
    match j % 3 {
        0 => 0..l,
        1 => l..2 * l,
        _ => 0..2 * l,
    }
}

/// Draws the ground truth, then independent train and test splits from it.
///
/// Every stream has its own ChaCha stream id so changing one split size does
/// not perturb the other split or the truth.
pub fn generate(cfg: &GeneratorConfig) -> Result<Generated> {
    cfg.validate()?;
    let l = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let rho = cfg.affinity_corr;
    let rest = (1.0 - rho * rho).sqrt();
    let mut user_click = Vec::with_capacity(cfg.n_users * l);
    let mut user_conv = Vec::with_capacity(cfg.n_users * l);
    for _ in 0..cfg.n_users {
        for _ in 0..l {
            let c = normal(&mut rng);
            let z = normal(&mut rng);
            user_click.push(cfg.latent_scale * c);
            user_conv.push(cfg.latent_scale * (rho * c + rest * z));
        }
    }
    let tag_topics: Vec<f64> = (0..cfg.n_tags * l).map(|_| normal(&mut rng)).collect();
    let all_tags: Vec<u32> = (0..cfg.n_tags as u32).collect();
    let ad_tags: Vec<Vec<u32>> = (0..cfg.n_ads)
        .map(|_| {
            let n = rng.random_range(1..=cfg.max_ad_tags);
            let mut t: Vec<u32> = all_tags.choose_multiple(&mut rng, n).copied().collect();
            t.sort_unstable();
            t
        })
        .collect();

    // Fields quantise a noisy view of the latents against per-field codebooks.
    // The last field is multi-valued: the two nearest codes.
    let mut user_fields = vec![Vec::with_capacity(cfg.n_fields); cfg.n_users];
    let mut field_specs = Vec::with_capacity(cfg.n_fields);
    for j in 0..cfg.n_fields {
        let view = field_view(j, l);
        let dim = view.len();
        let codebook: Vec<f64> = (0..cfg.field_vocab * dim).map(|_| cfg.latent_scale * normal(&mut rng)).collect();
        let picks = if j + 1 == cfg.n_fields && cfg.n_fields > 1 { 2.min(cfg.field_vocab) } else { 1 };
        for (u, fields) in user_fields.iter_mut().enumerate() {
            let x: Vec<f64> = view
                .clone()
                .map(|i| {
                    let base = if i < l { user_click[u * l + i] } else { user_conv[u * l + i - l] };
                    base + cfg.field_noise * cfg.latent_scale * normal(&mut rng)
                })
                .collect();
            fields.push(nearest(&codebook, dim, &x, picks));
        }
        field_specs.push(FieldSpec { name: format!("field_{j}"), vocab: cfg.field_vocab });
    }

    let mut truth = GroundTruth {
        latent_dim: l,
        click_offset: cfg.click_offset,
        conv_offset: cfg.conv_offset,
        user_click,
        user_conv,
        tag_topics,
        ad_tags,
        user_fields,
        posterior_scale: 0.0,
    };
    let mean_click = mean_click_probability(&truth);
    truth.posterior_scale = if cfg.negative_ratio == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (cfg.negative_ratio * mean_click)
    };
    if !truth.posterior_scale.is_finite() && cfg.negative_ratio > 0.0 {
        return Err(Error::Config("exposure stream never clicks; raise click_offset".into()));
    }

    let train = draw_split(cfg, &truth, cfg.n_train, 0, 1)?;
    let test = draw_split(cfg, &truth, cfg.n_test, cfg.n_train as u64, 2)?;
    let schema = DataSchema { user_fields: field_specs, tag_vocab: cfg.n_tags };
    Ok(Generated { train, test, truth, schema })
}

/// Exact mean click probability over every user x ad exposure.
fn mean_click_probability(truth: &GroundTruth) -> f64 {
    let ads: Vec<Vec<f64>> = (0..truth.ad_tags.len()).map(|a| truth.ad_vector(a)).collect();
    let mut total = 0.0;
    for u in 0..truth.n_users() {
        let row = truth.row(&truth.user_click, u);
        let mut acc = 0.0;
        for a in &ads {
            acc += sigmoid(row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() + truth.click_offset);
        }
        total += acc / ads.len() as f64;
    }
    total / truth.n_users() as f64
}

fn draw_split(cfg: &GeneratorConfig, truth: &GroundTruth, n: usize, first_imp: u64, stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let n_pos = cfg.positives(n);
    let record = |user: u32, ad: u32, click: u8, conv: u8| Example {
        user_id: user,
        ad_id: ad,
        imp: 0,
        fields: truth.user_fields[user as usize].clone(),
        tags: truth.ad_tags[ad as usize].clone(),
        click,
        conv,
    };

    let mut examples = Vec::with_capacity(n);
    while examples.len() < n_pos {
        let user = rng.random_range(0..cfg.n_users) as u32;
        let ad = rng.random_range(0..cfg.n_ads) as u32;
        if rng.random::<f64>() < truth.p_click(user, ad)? {
            let conv = (rng.random::<f64>() < truth.p_conv_given_click(user, ad)?) as u8;
            examples.push(record(user, ad, 1, conv));
        }
    }
    while examples.len() < n {
        let user = rng.random_range(0..cfg.n_users) as u32;
        let ad = rng.random_range(0..cfg.n_ads) as u32;
        examples.push(record(user, ad, 0, 0));
    }
    examples.shuffle(&mut rng);
    for (i, e) in examples.iter_mut().enumerate() {
        e.imp = first_imp + i as u64;
    }
    Ok(Dataset::new(examples))
}

/// AUC of the generating probabilities against the realised labels.
pub fn bayes_auc(truth: &GroundTruth, ds: &Dataset, task: TaskId) -> Result<f64> {
    let scores = ds
        .examples
        .iter()
        .map(|e| truth.label_probability(e.user_id, e.ad_id, task))
        .collect::<Result<Vec<_>>>()?;
    crate::eval::auc(&scores, &ds.labels(task))
}
