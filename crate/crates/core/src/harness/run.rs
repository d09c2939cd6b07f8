use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::ExperimentConfig;
use super::report::render_report;
use super::results::{AggregateRow, ResultRow, ResultsTable};
use crate::adaptation::{adapt_from_pool, AdaptationConfig, AdaptationMode, ThresholdPolicy};
use crate::datasets::{
    band_align, generate, GeneratorConfig, SegmentationSample, TaskKind, DATASET_MAGIC,
    DATASET_VERSION,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare, paired_accuracies, rank_sum_one_tailed, records_csv, score_records, significance_csv,
    summarize, wilcoxon_one_tailed, BaselineRegistry, MetricsRecord, ModelPredictor, Predictor,
    RankTest, UniformNoise, ALPHA, EXACT_MAX_N,
};
use crate::training::{pretrain, History};
use crate::unet::{
    save_checkpoint, BackboneVariant, Model, UNetConfig, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Version of the manifest layout.
pub const MANIFEST_VERSION: u32 = 1;

/// SplitMix64 finalizer over the run seed and a stream label.
fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed.wrapping_add(h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Every seed a single run seed fans out into.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedPlan {
    pub seed: u64,
    pub pretask_data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub uniform_noise: u64,
    pub random_init: u64,
    /// Per downstream task: generator seed and pool selection seed.
    pub tasks: BTreeMap<TaskKind, (u64, u64)>,
}

impl SeedPlan {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        let tasks = cfg
            .downstream
            .iter()
            .map(|d| {
                let data = derive_seed(seed, &format!("{}/data", d.kind)) ^ d.seed;
                (
                    d.kind,
                    (data, derive_seed(seed, &format!("{}/selection", d.kind))),
                )
            })
            .collect();
        Self {
            seed,
            pretask_data: derive_seed(seed, "pretask/data") ^ cfg.pretask.seed,
            init: derive_seed(seed, "init"),
            shuffle: derive_seed(seed, "shuffle"),
            uniform_noise: derive_seed(seed, "baseline/uniform-noise"),
            random_init: derive_seed(seed, "baseline/random-init-unet"),
            tasks,
        }
    }

    /// Network configuration of `variant` initialized for this seed.
    pub fn network(&self, variant: &UNetConfig) -> UNetConfig {
        UNetConfig {
            seed: variant.seed ^ self.init,
            ..variant.clone()
        }
    }
}

/// A stage that failed; the affected cell produced no rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellFailure {
    pub seed: u64,
    pub task: Option<TaskKind>,
    pub variant: Option<BackboneVariant>,
    pub stage: &'static str,
    pub error: String,
}

/// Per-image records kept for pooled significance.
#[derive(Clone, Debug)]
struct CellRecords {
    task: TaskKind,
    variant: BackboneVariant,
    k: usize,
    model: Vec<MetricsRecord>,
    uniform_noise: Vec<MetricsRecord>,
    random_init: Vec<MetricsRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineSummary {
    pub task: TaskKind,
    pub seed: u64,
    pub baseline: String,
    pub mean_balanced_accuracy: f64,
    pub n_defined: usize,
}

/// Everything a finished run produced in memory.
#[derive(Debug)]
pub struct RunOutcome {
    pub table: ResultsTable,
    pub baselines: Vec<BaselineSummary>,
    pub failures: Vec<CellFailure>,
    pub histories: BTreeMap<(u64, BackboneVariant), History>,
    pub out_dir: PathBuf,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Eval set of `eval_size` images followed by a disjoint unlabeled pool.
pub fn downstream_split(
    gen: &GeneratorConfig,
    data_seed: u64,
    eval_size: usize,
    pool_size: usize,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    let mut all = generate(&GeneratorConfig {
        n_samples: eval_size + pool_size,
        seed: data_seed,
        ..gen.clone()
    })?;
    let pool = all.split_off(eval_size);
    let eval_ids: BTreeSet<u64> = all.iter().map(|s| s.sample_id).collect();
    if let Some(s) = pool.iter().find(|s| eval_ids.contains(&s.sample_id)) {
        return Err(Error::contract(
            "downstream_split",
            format!("sample id {} is in both pool and eval set", s.sample_id),
        ));
    }
    Ok((all, pool))
}

struct Pretrained {
    seed: u64,
    variant: BackboneVariant,
    outcome: Result<(Model, History)>,
    seconds: f64,
}

fn pretrain_job(
    cfg: &ExperimentConfig,
    plan: &SeedPlan,
    variant: &UNetConfig,
    data: &[SegmentationSample],
) -> Pretrained {
    let started = Instant::now();
    let split = data.len() - cfg.validation_size;
    let outcome = Model::build(&plan.network(variant)).and_then(|m| {
        pretrain(
            &m,
            &data[..split],
            &data[split..],
            &cfg.pretrain_config(plan.shuffle),
        )
    });
    Pretrained {
        seed: plan.seed,
        variant: variant.variant,
        outcome,
        seconds: started.elapsed().as_secs_f64(),
    }
}

struct CellOutput {
    rows: Vec<ResultRow>,
    records: Vec<CellRecords>,
    baselines: Vec<BaselineSummary>,
    files: Vec<(PathBuf, String)>,
}

/// One (seed, task) cell: data, baselines, then every variant at every k.
fn run_cell(
    cfg: &ExperimentConfig,
    plan: &SeedPlan,
    gen: &GeneratorConfig,
    models: &[(&UNetConfig, &Model)],
) -> Result<CellOutput> {
    let task = gen.kind;
    let (data_seed, selection_seed) = plan.tasks[&task];
    let (eval, pool) =
        downstream_split(gen, data_seed, cfg.eval_set_size, cfg.unlabeled_pool_size)?;
    let policy: &ThresholdPolicy = &cfg.threshold;
    let registry = BaselineRegistry::with_defaults();
    let dir = PathBuf::from(format!("metrics/seed{}/{task}", plan.seed));
    let mut out = CellOutput {
        rows: vec![],
        records: vec![],
        baselines: vec![],
        files: vec![],
    };

    let noise = UniformNoise::new(plan.uniform_noise);
    let noise_records = score_records(&noise, &eval, policy)?;
    out.baselines.push(baseline_summary(
        task,
        plan.seed,
        noise.name(),
        &noise_records,
    ));
    if cfg.save_per_image {
        out.files
            .push((dir.join("uniform-noise.csv"), records_csv(&noise_records)));
    }

    for &(variant_cfg, model) in models {
        let variant = variant_cfg.variant;
        let random = registry.build(
            "random-init-unet",
            &plan.network(variant_cfg),
            plan.random_init,
        )?;
        let random_records = score_records(random.as_ref(), &eval, policy)?;
        out.baselines.push(baseline_summary(
            task,
            plan.seed,
            &format!("random-init-unet/{variant}"),
            &random_records,
        ));
        let pool_images: Vec<_> = pool
            .iter()
            .map(|s| band_align(&s.image, variant_cfg.in_channels))
            .collect::<Result<_>>()?;
        if cfg.save_per_image {
            out.files.push((
                dir.join(format!("random-init-unet_{variant}.csv")),
                records_csv(&random_records),
            ));
        }
        for &k in &cfg.k_sweep {
            let adapt = AdaptationConfig {
                k,
                image_selection_seed: selection_seed,
                mode: AdaptationMode::ResetRecompute,
                chunk_size: cfg.adaptation_chunk_size,
            };
            let adapted = adapt_from_pool(model, &pool_images, &adapt)?;
            let predictor = ModelPredictor::new(variant.name(), adapted);
            let records = score_records(&predictor, &eval, policy)?;
            let vs_noise = compare(&records, &noise_records, cfg.rank_test);
            let vs_random = compare(&records, &random_records, cfg.rank_test);
            if cfg.save_per_image {
                out.files.push((
                    dir.join(format!("{variant}_k{k}.csv")),
                    records_csv(&records),
                ));
                out.files.push((
                    dir.join(format!("{variant}_k{k}_significance.csv")),
                    significance_csv(&[
                        ("uniform-noise".into(), vs_noise),
                        ("random-init-unet".into(), vs_random),
                    ]),
                ));
            }
            let summary = summarize(&records);
            out.rows.push(ResultRow {
                task,
                variant,
                k,
                seed: plan.seed,
                mean_balanced_accuracy: summary.mean,
                n_defined: summary.n_defined,
                p_uniform_noise: vs_noise.p_value,
                p_random_init: vs_random.p_value,
            });
            out.records.push(CellRecords {
                task,
                variant,
                k,
                model: records,
                uniform_noise: noise_records.clone(),
                random_init: random_records.clone(),
            });
        }
    }
    Ok(out)
}

fn baseline_summary(
    task: TaskKind,
    seed: u64,
    name: &str,
    records: &[MetricsRecord],
) -> BaselineSummary {
    let s = summarize(records);
    BaselineSummary {
        task,
        seed,
        baseline: name.to_string(),
        mean_balanced_accuracy: s.mean,
        n_defined: s.n_defined,
    }
}

/// One-tailed test on per-image pairs formed within each seed and pooled
/// across seeds.
fn pooled_p(pairs: &[(Vec<MetricsRecord>, Vec<MetricsRecord>)], test: RankTest) -> f64 {
    let all: Vec<(f64, f64)> = pairs
        .iter()
        .flat_map(|(ours, theirs)| paired_accuracies(ours, theirs))
        .collect();
    match test {
        RankTest::SignedRank => {
            wilcoxon_one_tailed(&all.iter().map(|(a, b)| a - b).collect::<Vec<_>>()).p_value
        }
        RankTest::RankSum => {
            let (a, b): (Vec<f64>, Vec<f64>) = all.into_iter().unzip();
            rank_sum_one_tailed(&a, &b).p_value
        }
    }
}

fn with_pooled_significance(
    mut table: ResultsTable,
    records: &[CellRecords],
    test: RankTest,
) -> ResultsTable {
    let mut groups: BTreeMap<(TaskKind, BackboneVariant, usize), Vec<&CellRecords>> =
        BTreeMap::new();
    for r in records {
        groups.entry((r.task, r.variant, r.k)).or_default().push(r);
    }
    for a in &mut table.aggregates {
        let Some(cells) = groups.get(&(a.task, a.variant, a.k)) else {
            continue;
        };
        let noise: Vec<_> = cells
            .iter()
            .map(|c| (c.model.clone(), c.uniform_noise.clone()))
            .collect();
        let random: Vec<_> = cells
            .iter()
            .map(|c| (c.model.clone(), c.random_init.clone()))
            .collect();
        a.p_uniform_noise = Some(pooled_p(&noise, test));
        a.p_random_init = Some(pooled_p(&random, test));
    }
    table
}

fn baselines_csv(rows: &[BaselineSummary]) -> String {
    let mut out = String::from("task,seed,baseline,mean_balanced_accuracy,n_defined\n");
    for b in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.task, b.seed, b.baseline, b.mean_balanced_accuracy, b.n_defined
        ));
    }
    out
}

/// Pretrains every variant per seed, then evaluates every (seed, task) cell
/// at every k against both reference baselines. Failed stages are recorded
/// and skipped; all outputs are sorted so the thread count never changes
/// them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::contract("run_experiment", format!("thread pool: {e}")))?;
    let plans: Vec<SeedPlan> = cfg
        .seeds()
        .into_iter()
        .map(|s| SeedPlan::new(cfg, s))
        .collect();
    let mut failures = Vec::new();

    // Pre-task data per seed.
    let mut pretask_data = BTreeMap::new();
    for plan in &plans {
        match generate(&GeneratorConfig {
            seed: plan.pretask_data,
            ..cfg.pretask.clone()
        }) {
            Ok(d) => {
                pretask_data.insert(plan.seed, d);
            }
            Err(e) => failures.push(CellFailure {
                seed: plan.seed,
                task: None,
                variant: None,
                stage: "pretask-data",
                error: e.to_string(),
            }),
        }
    }

    let jobs: Vec<(&SeedPlan, &UNetConfig)> = plans
        .iter()
        .filter(|p| pretask_data.contains_key(&p.seed))
        .flat_map(|p| cfg.variants.iter().map(move |v| (p, v)))
        .collect();
    let trained: Vec<Pretrained> = pool.install(|| {
        jobs.par_iter()
            .map(|(p, v)| pretrain_job(cfg, p, v, &pretask_data[&p.seed]))
            .collect()
    });
    let mut models: BTreeMap<(u64, BackboneVariant), Model> = BTreeMap::new();
    let mut histories = BTreeMap::new();
    let mut pretrain_seconds = BTreeMap::new();
    for t in trained {
        pretrain_seconds.insert(format!("seed{}/{}", t.seed, t.variant), t.seconds);
        match t.outcome {
            Ok((model, history)) => {
                write(
                    &out_dir.join(format!("histories/seed{}_{}.csv", t.seed, t.variant)),
                    &history.to_csv(),
                )?;
                if cfg.save_checkpoints {
                    let path =
                        out_dir.join(format!("checkpoints/seed{}_{}.hzmd", t.seed, t.variant));
                    ensure_parent(&path)?;
                    let meta = json!({
                        "seed": t.seed,
                        "variant": t.variant,
                        "best_epoch": history.best_epoch,
                        "pretask": cfg.pretask.kind,
                    });
                    save_checkpoint(&model, &meta, &path)?;
                }
                models.insert((t.seed, t.variant), model);
                histories.insert((t.seed, t.variant), history);
            }
            Err(e) => failures.push(CellFailure {
                seed: t.seed,
                task: None,
                variant: Some(t.variant),
                stage: "pretrain",
                error: e.to_string(),
            }),
        }
    }

    let cells: Vec<(&SeedPlan, &GeneratorConfig)> = plans
        .iter()
        .flat_map(|p| cfg.downstream.iter().map(move |d| (p, d)))
        .collect();
    let evaluated: Vec<(u64, TaskKind, Result<CellOutput>, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|(plan, gen)| {
                let t0 = Instant::now();
                let available: Vec<(&UNetConfig, &Model)> = cfg
                    .variants
                    .iter()
                    .filter_map(|v| models.get(&(plan.seed, v.variant)).map(|m| (v, m)))
                    .collect();
                let out = run_cell(cfg, plan, gen, &available);
                (plan.seed, gen.kind, out, t0.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut baselines = Vec::new();
    let mut cell_seconds = BTreeMap::new();
    for (seed, task, out, seconds) in evaluated {
        cell_seconds.insert(format!("seed{seed}/{task}"), seconds);
        match out {
            Ok(c) => {
                for (rel, text) in &c.files {
                    write(&out_dir.join(rel), text)?;
                }
                rows.extend(c.rows);
                records.extend(c.records);
                baselines.extend(c.baselines);
            }
            Err(e) => failures.push(CellFailure {
                seed,
                task: Some(task),
                variant: None,
                stage: "cell",
                error: e.to_string(),
            }),
        }
    }
    baselines.sort_by(|a, b| (a.task, a.seed, &a.baseline).cmp(&(b.task, b.seed, &b.baseline)));

    let table = with_pooled_significance(ResultsTable::from_rows(rows), &records, cfg.rank_test);
    write(&out_dir.join("results.csv"), &table.results_csv())?;
    write(&out_dir.join("aggregate.csv"), &table.aggregate_csv())?;
    write(&out_dir.join("trend.csv"), &table.trend_csv())?;
    write(&out_dir.join("baselines.csv"), &baselines_csv(&baselines))?;
    if !table.aggregates.is_empty() {
        render_report(&table, &out_dir.join("report"))?;
    }
    let manifest = manifest(
        cfg,
        &plans,
        &failures,
        pretrain_seconds,
        cell_seconds,
        started.elapsed().as_secs_f64(),
    );
    write(
        &out_dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    Ok(RunOutcome {
        table,
        baselines,
        failures,
        histories,
        out_dir,
    })
}

fn manifest(
    cfg: &ExperimentConfig,
    plans: &[SeedPlan],
    failures: &[CellFailure],
    pretrain_seconds: BTreeMap<String, f64>,
    cell_seconds: BTreeMap<String, f64>,
    total_seconds: f64,
) -> serde_json::Value {
    let magic = |m: &[u8; 4]| String::from_utf8_lossy(m).into_owned();
    json!({
        "manifest_version": MANIFEST_VERSION,
        "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
        "config": cfg,
        "seeds": plans,
        "formats": {
            "dataset": { "magic": magic(DATASET_MAGIC), "version": DATASET_VERSION },
            "checkpoint": { "magic": magic(CHECKPOINT_MAGIC), "version": CHECKPOINT_VERSION },
            "tables": "csv",
            "charts": "svg",
        },
        "conventions": {
            "threshold_quantile": cfg.threshold.quantile,
            "threshold_rank": ThresholdPolicy::RANK_CONVENTION,
            "threshold_comparison": ThresholdPolicy::COMPARISON,
            "bn_update_mode": AdaptationMode::ResetRecompute,
            "bn_variance": "biased",
            "bn_eps": cfg.variants.iter().map(|v| (v.variant.name(), v.bn_eps)).collect::<BTreeMap<_, _>>(),
            "bn_momentum": cfg.variants.iter().map(|v| (v.variant.name(), v.bn_momentum)).collect::<BTreeMap<_, _>>(),
            "rank_test": cfg.rank_test,
            "tail": "one-sided, model greater than baseline",
            "alpha": ALPHA,
            "exact_null_max_n": EXACT_MAX_N,
            "zero_differences": "dropped",
            "pairing": "per image; images with undefined balanced accuracy on either side are excluded",
            "aggregate_std": "population, over per-seed means",
            "aggregate_significance": "per-image pairs pooled over seeds",
            "random_init_baseline": "one untrained network per variant and seed",
        },
        "failures": failures,
        "wall_seconds": { "total": total_seconds, "pretrain": pretrain_seconds, "cells": cell_seconds },
    })
}

/// Recomputes seed-level aggregates from their rows so stored aggregates can
/// be checked independently of the runner.
pub fn aggregates_match(table: &ResultsTable) -> bool {
    let fresh = ResultsTable::from_rows(table.rows.clone());
    fresh.aggregates.len() == table.aggregates.len()
        && fresh.aggregates.iter().zip(&table.aggregates).all(
            |(a, b): (&AggregateRow, &AggregateRow)| {
                (a.task, a.variant, a.k, a.n_seeds) == (b.task, b.variant, b.k, b.n_seeds)
                    && a.mean.to_bits() == b.mean.to_bits()
                    && a.std.to_bits() == b.std.to_bits()
            },
        )
}
