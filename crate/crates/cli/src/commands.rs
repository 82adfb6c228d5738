//! The subcommands, as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mopoe_core::data::Dataset;
use mopoe_core::harness::{
    evaluate_model, train_coherence_classifiers, Classifier, EvalReport, MlpClassifier,
};
use mopoe_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ParameterStore};
use mopoe_core::objectives::{evaluate, train_epoch, EpochMetrics};
use mopoe_core::oracle::verify::{verify_all, LemmaReport, VerifyConfig};
use mopoe_core::rng::{substream, RngState};
use mopoe_core::tensor::Optimizer;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{self, Manifest};
use crate::metrics::{self, MetricsRow, RowContext};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 1 << 32;

/// Everything that determines a run besides the config file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub run_id: String,
    pub variant: String,
    pub dataset_hash: String,
    pub data_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub classifier_seed: u64,
    pub parameters: usize,
}

pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    dataset::generate(&cfg.data.synthetic, &cfg.data.dir)
}

fn context(cfg: &RunConfig) -> RowContext {
    RowContext {
        run_id: cfg.run_id(),
        variant: cfg.objective.kind.clone(),
        beta: cfg.objective.beta,
        seed: cfg.train.seed,
    }
}

fn epoch_rows(ctx: &RowContext, epoch: usize, split: &str, m: &EpochMetrics) -> Vec<MetricsRow> {
    vec![
        ctx.row(epoch, &format!("{split}_elbo"), "all", m.elbo),
        ctx.row(epoch, &format!("{split}_recon"), "all", m.recon),
        ctx.row(epoch, &format!("{split}_kl"), "all", m.kl),
    ]
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub params: ParameterStore,
    pub rows: Vec<MetricsRow>,
    /// Objective on the test split after the last epoch.
    pub final_test: EpochMetrics,
}

/// Trains into `run_dir`: resolved config, run info, per-epoch metrics,
/// periodic and final checkpoints.
pub fn train(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let (manifest, train_set, test_set) = dataset::load(&cfg.data.dir)?;
    train_on(cfg, run_dir, &manifest, &train_set, &test_set)
}

pub fn train_on(
    cfg: &RunConfig,
    run_dir: &Path,
    manifest: &Manifest,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = cfg.kind()?;
    let objective = cfg.objective_config();
    let model = cfg.model_config(&manifest.dims)?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let seed = cfg.train.seed;
    let info = RunInfo {
        run_id: cfg.run_id(),
        variant: cfg.objective.kind.clone(),
        dataset_hash: manifest.hash.clone(),
        data_seed: manifest.config.seed,
        train_seed: seed,
        eval_seed: cfg.eval.seed,
        classifier_seed: cfg.classifier.seed,
        parameters: model.parameter_count(),
    };
    fs::write(run_dir.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;

    let mut params = ParameterStore::init(&model, seed)?;
    let mut optimizer = Optimizer::adam(cfg.train.learning_rate);
    let mut rng = substream(seed, TRAIN_STREAM);
    let ctx = context(cfg);
    let csv = run_dir.join(METRICS_FILE);
    metrics::create(&csv)?;
    let batch = cfg.train.batch_size;
    let test_metrics = |params: &ParameterStore, epoch: usize| {
        let mut eval_rng = substream(seed, TEST_STREAM + epoch as u64);
        evaluate(&model, params, test_set, kind, &objective, batch, &mut eval_rng)
    };
    let mut final_test = test_metrics(&params, 0)?;
    let mut rows = epoch_rows(&ctx, 0, "test", &final_test);
    metrics::append(&csv, &rows)?;

    let save = |path: &Path, params: &ParameterStore, opt: &Optimizer, rng: &RngState, epoch: usize| {
        save_checkpoint(
            path,
            &Checkpoint {
                config: model.clone(),
                params: params.clone(),
                optimizer: Some(opt.clone()),
                rng: Some(rng.clone()),
                step: opt.step,
                epoch: epoch as u64,
            },
        )
    };
    for epoch in 1..=cfg.train.epochs {
        let train_m = train_epoch(
            &model,
            &mut params,
            &mut optimizer,
            train_set,
            kind,
            &objective,
            batch,
            &mut rng,
        )?;
        final_test = test_metrics(&params, epoch)?;
        let mut new_rows = epoch_rows(&ctx, epoch, "train", &train_m);
        new_rows.extend(epoch_rows(&ctx, epoch, "test", &final_test));
        metrics::append(&csv, &new_rows)?;
        rows.extend(new_rows);
        if cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0 {
            let path = run_dir.join("checkpoints").join(format!("epoch-{epoch:04}.bin"));
            save(&path, &params, &optimizer, &RngState::capture(&rng), epoch)?;
        }
    }
    save(
        &run_dir.join(CHECKPOINT_FILE),
        &params,
        &optimizer,
        &RngState::capture(&rng),
        cfg.train.epochs,
    )?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        model,
        params,
        rows,
        final_test,
    })
}

fn classifier_path(data_dir: &Path, j: usize) -> PathBuf {
    data_dir.join("classifiers").join(format!("m{j}.bin"))
}

/// Loads the dataset's coherence classifiers, training and saving them
/// first if any is missing.
pub fn classifiers(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<MlpClassifier>> {
    let m = train_set.num_modalities();
    let dir = &cfg.data.dir;
    if (0..m).all(|j| classifier_path(dir, j).exists()) {
        return (0..m)
            .map(|j| Ok(MlpClassifier::load(&classifier_path(dir, j))?))
            .collect();
    }
    let bank = train_coherence_classifiers(train_set, test_set, &cfg.model.hidden, &cfg.classifier)?;
    for (j, c) in bank.iter().enumerate() {
        c.save(&classifier_path(dir, j))?;
    }
    Ok(bank)
}

/// Metric rows for a report; coherence targets are named `coherence:xJ`.
pub fn report_rows(ctx: &RowContext, epoch: usize, report: &EvalReport) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for p in &report.probe {
        rows.push(ctx.row(epoch, "probe_accuracy", &p.subset, p.value));
    }
    for c in &report.conditional_coherence {
        rows.push(ctx.row(epoch, &format!("coherence:x{}", c.target), &c.subset, c.value));
    }
    rows.push(ctx.row(epoch, "joint_coherence", "prior", report.joint_coherence));
    for i in &report.iwae {
        rows.push(ctx.row(epoch, "iwae", &i.subset, i.value));
        rows.push(ctx.row(epoch, "iwae_se", &i.subset, i.se.unwrap_or(f64::NAN)));
    }
    rows
}

/// Evaluates parameters and writes `eval.csv` and `eval.json` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn eval_params<C: Classifier>(
    cfg: &RunConfig,
    model: &ModelConfig,
    params: &ParameterStore,
    epoch: usize,
    train_set: &Dataset,
    test_set: &Dataset,
    judges: &[C],
    out_dir: &Path,
) -> Result<(EvalReport, Vec<MetricsRow>)> {
    let fusion = cfg.eval_fusion();
    let report = evaluate_model(model, params, &fusion, train_set, test_set, judges, &cfg.eval)?;
    let rows = report_rows(&context(cfg), epoch, &report);
    fs::create_dir_all(out_dir)?;
    metrics::write(&out_dir.join(EVAL_CSV), &rows)?;
    fs::write(out_dir.join(EVAL_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((report, rows))
}

/// The `eval` command: loads a checkpoint, then evaluates it.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalReport> {
    let (_, train_set, test_set) = dataset::load(&cfg.data.dir)?;
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let judges = classifiers(cfg, &train_set, &test_set)?;
    let (report, _) = eval_params(
        cfg,
        &ckpt.config,
        &ckpt.params,
        ckpt.epoch as usize,
        &train_set,
        &test_set,
        &judges,
        out_dir,
    )?;
    Ok(report)
}

/// Directory of one sweep cell.
pub fn cell_dir(out: &Path, beta: f64, seed: u64) -> PathBuf {
    out.join(format!("beta-{beta}")).join(format!("seed-{seed}"))
}

/// Sweep parallelism from `MOPOE_THREADS`, else the available cores.
pub fn sweep_threads() -> usize {
    std::env::var("MOPOE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates every (beta, seed) cell, then writes `sweep.csv`
/// with the final test KL, test ELBO, joint coherence and full-subset IWAE.
pub fn sweep(cfg: &RunConfig, threads: usize) -> Result<Vec<MetricsRow>> {
    let (manifest, train_set, test_set) = dataset::load(&cfg.data.dir)?;
    let judges = classifiers(cfg, &train_set, &test_set)?;
    let cells: Vec<(f64, u64)> = cfg
        .sweep
        .betas
        .iter()
        .flat_map(|&b| cfg.sweep.seeds.iter().map(move |&s| (b, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    let results: Vec<Result<Vec<MetricsRow>>> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(beta, seed)| {
                let mut cell = cfg.clone();
                cell.objective.beta = beta;
                cell.train.seed = seed;
                let dir = cell_dir(&cfg.out, beta, seed);
                let t = train_on(&cell, &dir, &manifest, &train_set, &test_set)?;
                let (report, _) = eval_params(
                    &cell,
                    &t.model,
                    &t.params,
                    cell.train.epochs,
                    &train_set,
                    &test_set,
                    &judges,
                    &dir,
                )?;
                let ctx = context(&cell);
                let e = cell.train.epochs;
                let full = report.iwae.last().map_or(f64::NAN, |i| i.value);
                Ok(vec![
                    ctx.row(e, "test_kl", "all", t.final_test.kl),
                    ctx.row(e, "test_elbo", "all", t.final_test.elbo),
                    ctx.row(e, "joint_coherence", "prior", report.joint_coherence),
                    ctx.row(e, "iwae", report.iwae.last().map_or("", |i| &i.subset), full),
                ])
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    metrics::write(&cfg.out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

pub fn verify(config: &VerifyConfig) -> Result<LemmaReport> {
    Ok(verify_all(config)?)
}

/// One line per check.
pub fn format_report(report: &LemmaReport) -> Vec<String> {
    report
        .checks
        .iter()
        .map(|c| {
            format!(
                "{} {:<14} cases={:<4} failures={:<3} worst_margin={:.3e} tol={}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.failures.len(),
                c.worst_margin,
                c.tolerance
            )
        })
        .collect()
}
