//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured values, then asserts. Tolerances are pinned below.
//!
//! Criteria 4, 5 and 8 share one set of training runs on the default
//! dataset (three seeds, three arms each); expect about 8 minutes on one
//! core in the optimised test profile.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use mvke::cli::holdout;
use mvke::data::{bayes_auc, generate, Dataset, GeneratorConfig};
use mvke::diffgraph::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use mvke::eval::{auc, evaluate, export_gate_weights, sensitivity_sweep, SweepBase};
use mvke::model::{init_params, mvke_forward, Batch, ExpertRouting, Model, ModelConfig, MvkeConfig, TaskId};
use mvke::serve::{build_caches, naive_scores, score_from_cache};
use mvke::train::{fit, mtl_loss, Mode, Precision, TrainConfig};
use mvke::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FULL_MODEL_GRAD_TOL: f64 = 1e-4;
const PRIMITIVE_GRAD_TOL: f64 = 1e-5;
const FULL_MODEL_ENTRIES_PER_TENSOR: usize = 32;
const SERVING_TOL: f64 = 1e-6;
const MIN_CTR_AUC: f64 = 0.70;
const MIN_CVR_AUC: f64 = 0.65;
const MAX_BAYES_GAP: f64 = 0.05;
const CTR_SLACK: f64 = 0.005;
const GATE_SUM_TOL: f64 = 1e-6;
const SWEEP_MIN_LIFT: f64 = 0.1;
const SEEDS: [u64; 3] = [1, 2, 3];
const EMBED_DIM: usize = 16;
const VALID_FRACTION: f64 = 0.1;

/// Writes past the test harness's output capture so the line shows up in a
/// plain `cargo test` run.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\n{line}");
    let _ = out.flush();
}

fn verdict(n: usize, pass: bool, detail: &str) {
    say(&format!("criterion {n}: {} | {detail}", if pass { "PASS" } else { "FAIL" }));
}

// ---- 1: gradients -------------------------------------------------------------

/// `Σ x ⊙ w` for a fixed random `w`, so every output entry gets a distinct
/// upstream gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let n: usize = g.shape(x).iter().product();
    let flat = g.reshape(x, &[1, n])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(vec![n, 1], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let s = g.matmul(flat, w)?;
    g.reshape(s, &[1])
}

fn random_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.insert(*name, Tensor::new(shape.clone(), data).unwrap()).unwrap();
    }
    s
}

type Primitive = fn(&mut Graph<'_, f64>) -> Result<Var>;
type Shapes = Vec<(&'static str, Vec<usize>)>;

fn primitive_cases() -> Vec<(&'static str, Shapes, Primitive)> {
    vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul(a, b)
        }),
        ("bmm", vec![("a", vec![2, 3, 4]), ("b", vec![2, 4, 2])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.bmm(a, b, false)
        }),
        ("bmm_t", vec![("a", vec![2, 3, 4]), ("b", vec![2, 5, 4])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.bmm(a, b, true)
        }),
        ("affine", vec![("x", vec![3, 4]), ("w", vec![4, 5]), ("b", vec![5])], |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            g.affine(x, w, b)
        }),
        ("tanh", vec![("x", vec![4, 3])], |g| {
            let x = g.param("x")?;
            g.tanh(x)
        }),
        ("relu", vec![("x", vec![4, 3])], |g| {
            let x = g.param("x")?;
            g.relu(x)
        }),
        ("sigmoid", vec![("x", vec![6])], |g| {
            let x = g.param("x")?;
            g.sigmoid(x)
        }),
        ("softmax", vec![("x", vec![3, 5])], |g| {
            let x = g.param("x")?;
            g.softmax(x)
        }),
        ("gather_segment_mean", vec![("t", vec![5, 3])], |g| {
            let t = g.param("t")?;
            let rows = g.gather(t, &[0, 4, 4, 2, 1, 3])?;
            g.segment_mean(rows, &[0, 1, 4, 6])
        }),
        ("mean_axis", vec![("x", vec![2, 3, 4])], |g| {
            let x = g.param("x")?;
            g.mean_axis(x, 1)
        }),
        ("concat", vec![("a", vec![2, 1, 3]), ("b", vec![2, 2, 3])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.concat(&[a, b], 1)
        }),
        ("broadcast_transpose", vec![("x", vec![2, 3])], |g| {
            let x = g.param("x")?;
            let t = g.transpose(x)?;
            g.broadcast(t, 3)
        }),
        ("cosine", vec![("a", vec![4, 5]), ("b", vec![4, 5])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.cosine(a, b)
        }),
        ("mul_scalar", vec![("x", vec![4]), ("s", vec![1])], |g| {
            let (x, s) = (g.param("x")?, g.param("s")?);
            g.mul_scalar(x, s)
        }),
        ("bce", vec![("z", vec![5])], |g| {
            let z = g.param("z")?;
            let p = g.sigmoid(z)?;
            g.bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0])
        }),
    ]
}

fn tiny_mvke(seed: u64) -> (MvkeConfig, ParamStore<f64>, Batch<f64>, Dataset) {
    let g = generate(&GeneratorConfig {
        n_users: 50,
        n_tags: 9,
        n_ads: 20,
        n_train: 4,
        n_test: 4,
        n_fields: 3,
        field_vocab: 6,
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = MvkeConfig {
        schema: g.schema.with_embed_dim(8),
        routing: ExpertRouting::five_experts(),
        hidden_dim: None,
        tau_init: 5.0,
    };
    let mut params = init_params::<f64>(&ModelConfig::Mvke(cfg.clone()), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in params.iter_mut().filter(|p| !p.name.ends_with("tau")) {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.6..0.6));
    }
    let batch = Batch::new(&cfg.schema, &g.train.examples).unwrap();
    (cfg, params, batch, g.train)
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let (cfg, mut params, batch, _) = tiny_mvke(11);
    assert_eq!(batch.len(), 4);
    let loss = |g: &mut Graph<'_, f64>| {
        let out = mvke_forward(g, &cfg, &batch)?;
        let a = g.bce(out.ctr.unwrap().p, &batch.click)?;
        let b = g.bce(out.cvr.unwrap().p, &batch.conv)?;
        g.add(a, b)
    };
    let sampled = GradCheckOptions { max_entries_per_tensor: Some(FULL_MODEL_ENTRIES_PER_TENSOR), ..Default::default() };
    let full = grad_check(&mut params, loss, &sampled).unwrap();
    // Every entry, reported only: gradients near 1e-7 sit at the
    // round-off floor of a 1e-5 central difference.
    let every = grad_check(&mut params, loss, &GradCheckOptions::default()).unwrap();

    let mut worst_prim = (0.0f64, "");
    for (i, (name, shapes, op)) in primitive_cases().into_iter().enumerate() {
        let mut s = random_store(&shapes, 100 + i as u64);
        let r = grad_check(
            &mut s,
            |g| {
                let y = op(g)?;
                weighted_sum(g, y, 7)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        if r.max_rel_error >= worst_prim.0 {
            worst_prim = (r.max_rel_error, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = full.max_rel_error <= FULL_MODEL_GRAD_TOL && worst_prim.0 <= PRIMITIVE_GRAD_TOL && secs < 60.0;
    verdict(
        1,
        pass,
        &format!(
            "full model max rel err {:.2e} over {} sampled entries (tol {FULL_MODEL_GRAD_TOL:.0e}); all {} entries {:.2e} at {}[{}] (info); worst primitive {} {:.2e} (tol {PRIMITIVE_GRAD_TOL:.0e}); {secs:.1}s",
            full.max_rel_error,
            full.entries_checked,
            every.entries_checked,
            every.max_rel_error,
            every.worst_param,
            every.worst_index,
            worst_prim.1,
            worst_prim.0
        ),
    );
    assert!(pass);
}

// ---- 2, 3: serving ------------------------------------------------------------

fn serving_model() -> (Model<f32>, Dataset) {
    let g = generate(&GeneratorConfig { n_users: 1000, n_ads: 300, n_train: 8000, n_test: 2000, seed: 5, ..Default::default() })
        .unwrap();
    let cfg = Mode::MvkeMt.model_config(g.schema.with_embed_dim(EMBED_DIM), 5, None, 5.0).unwrap();
    let model = Model::<f32>::init(cfg, 5).unwrap();
    let train = TrainConfig { epochs: 1, precision: Precision::F32, seed: 5, ..Default::default() };
    let (model, _) = fit(model, &g.train, &g.test, &train).unwrap();
    (model, g.test)
}

#[test]
fn criterion_02_serving_equivalence() {
    let start = Instant::now();
    let (model, data) = serving_model();
    let users: Vec<_> = data.users().into_iter().take(100).collect();
    let tags: Vec<u32> = (0..50).collect();
    assert_eq!(users.len(), 100);
    let (uc, tc, _) = build_caches(&model, &users, &tags).unwrap();

    let schema = model.schema();
    let mut max_diff = 0.0f64;
    let mut top1_mismatch = 0;
    for task in TaskId::ALL {
        for (uid, fields) in &users {
            let exs: Vec<_> = tags
                .iter()
                .map(|&t| mvke::data::Example {
                    user_id: *uid,
                    ad_id: 0,
                    imp: 0,
                    fields: fields.clone(),
                    tags: vec![t],
                    click: 0,
                    conv: 0,
                })
                .collect();
            let batch = Batch::<f32>::new(schema, &exs).unwrap();
            let full = model.predict(&batch).unwrap().into_iter().find(|(t, _)| *t == task).unwrap().1;
            let mut best_full = (f32::NEG_INFINITY, 0u32);
            let mut best_cached = (f32::NEG_INFINITY, 0u32);
            for (&tag, &f) in tags.iter().zip(&full) {
                let c = score_from_cache(&uc, &tc, *uid, tag, task).unwrap();
                max_diff = max_diff.max((f as f64 - c as f64).abs());
                if f > best_full.0 {
                    best_full = (f, tag);
                }
                if c > best_cached.0 {
                    best_cached = (c, tag);
                }
            }
            top1_mismatch += usize::from(best_full.1 != best_cached.1);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = max_diff <= SERVING_TOL && top1_mismatch == 0 && secs < 60.0;
    verdict(
        2,
        pass,
        &format!("100 users x 50 tags x 2 tasks, f32: max |cached - full| {max_diff:.2e} (tol {SERVING_TOL:.0e}); top-1 mismatches {top1_mismatch}; {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_invocation_counts() {
    let g = generate(&GeneratorConfig { n_users: 300, n_ads: 100, n_train: 2000, n_test: 500, seed: 9, ..Default::default() })
        .unwrap();
    let cfg = Mode::MvkeMt.model_config(g.schema.with_embed_dim(8), 5, None, 5.0).unwrap();
    let model = Model::<f32>::init(cfg, 9).unwrap();
    let users = g.train.users();
    let tags: Vec<u32> = (0..40).collect();
    let (nu, nt) = (users.len(), tags.len());
    let (uc, _, cached) = build_caches(&model, &users, &tags).unwrap();
    let mut naive_user = 0;
    let mut naive_tag = 0;
    for task in TaskId::ALL {
        let (_, calls) = naive_scores(&model, &users, &tags, task).unwrap();
        naive_user += calls.user_tower;
        naive_tag += calls.tag_tower;
    }
    let pass = cached.user_tower == nu
        && cached.tag_tower == 2 * nt
        && naive_user == nu * nt * 2
        && naive_tag == nu * nt * 2
        && uc.stored_vectors() == 5 * nu;
    verdict(
        3,
        pass,
        &format!(
            "|U|={nu} |T|={nt}: cached user {} tag {} (expect {nu}, {}); naive user {naive_user} tag {naive_tag} (expect {}); stored vectors {} (expect {})",
            cached.user_tower,
            cached.tag_tower,
            2 * nt,
            nu * nt * 2,
            uc.stored_vectors(),
            5 * nu
        ),
    );
    assert!(pass);
}

// ---- 4, 5, 8: trained models on the default dataset ---------------------------

struct SeedRun {
    seed: u64,
    bayes: [f64; 2],
    mt: [f64; 2],
    no_mtl: [f64; 2],
    mt_best_epoch: usize,
    mt_secs: f64,
    total_secs: f64,
}

struct Runs {
    seeds: Vec<SeedRun>,
    first_model: Model<f64>,
}

fn train_and_test(mode: Mode, train: &Dataset, valid: &Dataset, test: &Dataset, g: &mvke::data::Generated, seed: u64) -> (Model<f64>, mvke::eval::EvalReport, usize) {
    let cfg = mode.model_config(g.schema.with_embed_dim(EMBED_DIM), 5, None, 5.0).unwrap();
    let model = Model::<f64>::init(cfg, seed).unwrap();
    let tc = TrainConfig { seed, ..Default::default() };
    let (model, history) = fit(model, train, valid, &tc).unwrap();
    let report = evaluate(&model, test, mode.as_str(), seed).unwrap();
    (model, report, history.best_epoch)
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut seeds = Vec::new();
        let mut first_model = None;
        for seed in SEEDS {
            let start = Instant::now();
            let g = generate(&GeneratorConfig { seed, ..Default::default() }).unwrap();
            let (train, valid) = holdout(&g.train, VALID_FRACTION);
            let bayes = TaskId::ALL.map(|t| bayes_auc(&g.truth, &g.test, t).unwrap());
            let (model, mt, mt_best_epoch) = train_and_test(Mode::MvkeMt, &train, &valid, &g.test, &g, seed);
            let mt_secs = start.elapsed().as_secs_f64();
            let (_, ctr, _) = train_and_test(Mode::NoMtlCtr, &train, &valid, &g.test, &g, seed);
            let (_, cvr, _) = train_and_test(Mode::NoMtlCvr, &train, &valid, &g.test, &g, seed);
            let run = SeedRun {
                seed,
                bayes,
                mt: TaskId::ALL.map(|t| mt.auc(t).unwrap()),
                no_mtl: [ctr.auc(TaskId::Ctr).unwrap(), cvr.auc(TaskId::Cvr).unwrap()],
                mt_best_epoch,
                mt_secs,
                total_secs: start.elapsed().as_secs_f64(),
            };
            say(&format!(
                "seed {}: bayes {:.4}/{:.4} mvke-mt {:.4}/{:.4} (best epoch {}, {:.0}s) noMTL {:.4}/{:.4} ({:.0}s total)",
                run.seed, run.bayes[0], run.bayes[1], run.mt[0], run.mt[1], run.mt_best_epoch, run.mt_secs, run.no_mtl[0], run.no_mtl[1], run.total_secs
            ));
            seeds.push(run);
            first_model.get_or_insert(model);
        }
        Runs { seeds, first_model: first_model.unwrap() }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_04_learnability() {
    let r = runs();
    let [ctr, cvr] = [0, 1].map(|i| mean(r.seeds.iter().map(|s| s.mt[i])));
    let [b_ctr, b_cvr] = [0, 1].map(|i| mean(r.seeds.iter().map(|s| s.bayes[i])));
    let slowest = r.seeds.iter().map(|s| s.mt_secs).fold(0.0, f64::max);
    let pass = ctr >= MIN_CTR_AUC
        && cvr >= MIN_CVR_AUC
        && b_ctr - ctr <= MAX_BAYES_GAP
        && b_cvr - cvr <= MAX_BAYES_GAP
        && slowest < 600.0;
    verdict(
        4,
        pass,
        &format!(
            "mvke-mt over {} seeds: CTR {ctr:.4} (bayes {b_ctr:.4}, gap {:.4}), CVR {cvr:.4} (bayes {b_cvr:.4}, gap {:.4}); floors {MIN_CTR_AUC}/{MIN_CVR_AUC}, max gap {MAX_BAYES_GAP}; slowest seed {slowest:.0}s",
            SEEDS.len(),
            b_ctr - ctr,
            b_cvr - cvr
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_mtl_directionality() {
    let r = runs();
    let [mt_ctr, mt_cvr] = [0, 1].map(|i| mean(r.seeds.iter().map(|s| s.mt[i])));
    let [no_ctr, no_cvr] = [0, 1].map(|i| mean(r.seeds.iter().map(|s| s.no_mtl[i])));
    let cvr_gap = mt_cvr - no_cvr;
    let ctr_gap = mt_ctr - no_ctr;
    let per_seed: Vec<String> = r.seeds.iter().map(|s| format!("s{}:{:+.4}", s.seed, s.mt[1] - s.no_mtl[1])).collect();
    let pass = cvr_gap >= 0.0 && ctr_gap >= -CTR_SLACK;
    verdict(
        5,
        pass,
        &format!(
            "CVR mvke-mt {mt_cvr:.4} vs noMTL {no_cvr:.4} (gap {cvr_gap:+.4}; per seed {}); CTR mvke-mt {mt_ctr:.4} vs noMTL {no_ctr:.4} (gap {ctr_gap:+.4}, slack {CTR_SLACK})",
            per_seed.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_gate_behaviour() {
    let model = &runs().first_model;
    let tags: Vec<u32> = (0..model.schema().tag_vocab as u32).collect();
    let gm = export_gate_weights(model, &tags, &TaskId::ALL).unwrap();
    let worst_sum = gm.rows.iter().map(|r| (r.present().iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let widths_ok = gm.rows_for(TaskId::Ctr).all(|r| r.present().len() == 3) && gm.rows_for(TaskId::Cvr).all(|r| r.present().len() == 4);
    let [v_ctr, v_cvr] = TaskId::ALL.map(|t| gm.across_tag_variance(t));
    let pass = worst_sum <= GATE_SUM_TOL && widths_ok && v_ctr > 0.0 && v_cvr > 0.0 && gm.rows.len() == 2 * tags.len();
    verdict(
        8,
        pass,
        &format!(
            "{} rows; max |row sum - 1| {worst_sum:.2e} (tol {GATE_SUM_TOL:.0e}); widths 3/4 {}; across-tag variance ctr {v_ctr:.3e} cvr {v_cvr:.3e}",
            gm.rows.len(),
            if widths_ok { "ok" } else { "wrong" }
        ),
    );
    assert!(pass);
}

// ---- 6: routing isolation and additivity ---------------------------------------

fn task_probs(params: &ParamStore<f64>, cfg: &MvkeConfig, batch: &Batch<f64>, task: TaskId) -> Vec<f64> {
    let mut g = Graph::new(params);
    let out = mvke_forward(&mut g, cfg, batch).unwrap();
    g.value(out.get(task).unwrap().p).to_vec()
}

#[test]
fn criterion_06_routing_isolation_and_additivity() {
    let mut failures = Vec::new();
    let mut checks = 0;

    // Joint loss is exactly the sum of the two task losses.
    for seed in 0..5 {
        let (cfg, params, batch, _) = tiny_mvke(40 + seed);
        let config = ModelConfig::Mvke(cfg);
        let loss = |tasks: &[TaskId]| {
            let mut g = Graph::new(&params);
            let l = mtl_loss(&mut g, &config, &batch, tasks).unwrap();
            g.scalar(l)
        };
        let (joint, ctr, cvr) = (loss(&TaskId::ALL), loss(&[TaskId::Ctr]), loss(&[TaskId::Cvr]));
        checks += 1;
        if joint.to_bits() != (ctr + cvr).to_bits() {
            failures.push(format!("seed {seed}: joint {joint} != {ctr} + {cvr}"));
        }
    }

    // Moving an expert outside a task's set leaves that task bit-identical,
    // and the task loss sends no gradient to it.
    let (cfg, params, batch, _) = tiny_mvke(60);
    let d = cfg.schema.embed_dim;
    for task in TaskId::ALL {
        let before = task_probs(&params, &cfg, &batch, task);
        let mut g = Graph::new(&params);
        let out = mvke_forward(&mut g, &cfg, &batch).unwrap();
        let l = g.bce(out.get(task).unwrap().p, batch.labels(task)).unwrap();
        let grads = g.backward(l).unwrap();
        for e in (0..5).filter(|e| !cfg.routing.set(task).contains(e)) {
            let mut moved = params.clone();
            let names: Vec<String> = moved.names_with_prefix(&format!("vke.{e}.")).map(String::from).collect();
            for n in names {
                moved.by_name_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x += 0.37);
                let id = params.id(&n).unwrap();
                checks += 1;
                if grads.get(id).is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
                    failures.push(format!("{task} loss has gradient on {n}"));
                }
            }
            moved.by_name_mut("vk").unwrap().data_mut()[e * d..(e + 1) * d].iter_mut().for_each(|x| *x -= 0.5);
            checks += 1;
            if task_probs(&moved, &cfg, &batch, task) != before {
                failures.push(format!("{task} moved with expert {e}"));
            }
        }
    }

    // A click-only model step leaves the conversion-side parameters untouched.
    let (cfg, params, _, data) = tiny_mvke(70);
    let d = cfg.schema.embed_dim;
    let model = Model { config: ModelConfig::Mvke(cfg), params: params.clone() };
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 0.05,
        task_mode: Some(mvke::train::TaskMode::Ctr),
        ..Default::default()
    };
    let (trained, _) = fit(model, &data, &data, &tc).unwrap();
    for p in params.iter() {
        let frozen = p.name.starts_with("cvr.") || p.name.starts_with("vke.3.") || p.name.starts_with("vke.4.");
        if frozen {
            checks += 1;
            if trained.params.by_name(&p.name).unwrap().data() != p.tensor.data() {
                failures.push(format!("click-only step changed {}", p.name));
            }
        }
    }
    let vk_before = params.by_name("vk").unwrap().data();
    let vk_after = trained.params.by_name("vk").unwrap().data();
    checks += 1;
    if vk_before[3 * d..] != vk_after[3 * d..] {
        failures.push("click-only step changed conversion-only kernels".into());
    }

    let pass = failures.is_empty();
    verdict(6, pass, &format!("{checks} exact checks, {} failures {:?}", failures.len(), failures));
    assert!(pass);
}

// ---- 7: AUC oracle --------------------------------------------------------------

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

#[test]
fn criterion_07_auc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut instances = 0;
    while instances < 100 {
        let n = rng.random_range(2..=500);
        let grid = rng.random_range(2..=50) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0) * grid).floor() / grid).collect();
        let rate = rng.random_range(0.05..0.95);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(rate))).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        instances += 1;
        if auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    verdict(7, pass, &format!("{instances} instances (n <= 500, tied grids): {mismatches} inexact"));
    assert!(pass);
}

// ---- 9: expert-count sweep -------------------------------------------------------

/// Reduced dataset and schedule so seven models train in a few minutes.
fn sweep_generator() -> GeneratorConfig {
    GeneratorConfig { n_users: 3000, n_ads: 600, n_train: 40_000, n_test: 10_000, seed: 4, ..Default::default() }
}

#[test]
fn criterion_09_sensitivity_sweep() {
    let start = Instant::now();
    let g = generate(&sweep_generator()).unwrap();
    let (train, valid) = holdout(&g.train, VALID_FRACTION);
    let base = SweepBase {
        schema: g.schema.with_embed_dim(EMBED_DIM),
        hidden_dim: None,
        tau_init: 5.0,
        train: &train,
        valid: &valid,
        test: &g.test,
        train_config: TrainConfig { epochs: 3, seed: 4, ..Default::default() },
    };
    let counts: Vec<usize> = (4..=10).collect();
    let rows = sensitivity_sweep::<f64>(&counts, &base).unwrap();
    let floor = 0.5 + SWEEP_MIN_LIFT;
    let curve: Vec<String> = rows.iter().map(|r| format!("k={}:{:.4}/{:.4}", r.n_experts, r.ctr_auc, r.cvr_auc)).collect();
    let pass = rows.len() == 7 && rows.iter().all(|r| r.ctr_auc >= floor && r.cvr_auc >= floor);
    verdict(
        9,
        pass,
        &format!("{} rows, floor {floor}; ctr/cvr curve {}; {:.0}s", rows.len(), curve.join(" "), start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

// ---- 10: determinism through the binary ------------------------------------------

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_mvke")).args(args).env("MVKE_LOG", "warn").status().unwrap();
    assert!(status.success(), "mvke {args:?} failed: {status}");
}

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let data = dir.join("data");
    let model = dir.join("model");
    let sets = [
        "--set", "generator.n_users=1500",
        "--set", "generator.n_ads=300",
        "--set", "generator.n_train=12000",
        "--set", "generator.n_test=3000",
        "--set", "train.epochs=2",
    ];
    let seed = ["--seed", "13", "--precision", "f64"];
    let (d, m) = (data.to_str().unwrap(), model.to_str().unwrap());
    run_cli(&[&["gen-data", "--out", d][..], &seed, &sets].concat());
    run_cli(&[&["train", "--data", d, "--out", m][..], &seed, &sets].concat());
    run_cli(&[&["eval", "--data", d, "--checkpoint", m, "--out", m][..], &seed, &sets].concat());
    (std::fs::read(model.join("history.csv")).unwrap(), std::fs::read(model.join("report.csv")).unwrap())
}

#[test]
fn criterion_10_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ha, ra) = pipeline(a.path());
    let (hb, rb) = pipeline(b.path());
    let pass = ha == hb && ra == rb && !ha.is_empty() && !ra.is_empty();
    verdict(
        10,
        pass,
        &format!(
            "two gen-data/train/eval runs, seed 13, f64: history.csv {} ({} bytes), report.csv {} ({} bytes)",
            if ha == hb { "identical" } else { "differs" },
            ha.len(),
            if ra == rb { "identical" } else { "differs" },
            ra.len()
        ),
    );
    assert!(pass);
}

