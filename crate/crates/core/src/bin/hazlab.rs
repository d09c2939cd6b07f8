use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use hazlab::adaptation::{adapt_from_pool, AdaptationConfig};
use hazlab::datasets::{
    band_align, generate, read_dataset, write_dataset, GeneratorConfig, TaskKind,
};
use hazlab::evaluation::{evaluate, records_csv, BaselineRegistry, ModelPredictor, Predictor};
use hazlab::harness::verify::{gradcheck_suite, selftest_suite, GRADCHECK_TOLERANCE};
use hazlab::harness::{render_report, run_experiment, ExperimentConfig, ResultsTable, SeedPlan};
use hazlab::training::pretrain;
use hazlab::unet::{load_checkpoint, save_checkpoint, BackboneVariant, Model};
use hazlab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hazlab",
    version,
    about = "Micro U-Net transfer and batch-norm adaptation laboratory"
)]
struct Cli {
    /// JSON configuration (a generator config for `gen`, an experiment
    /// config or run manifest otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the HZDS container format.
    Gen {
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        id_offset: Option<u64>,
    },
    /// Pretrain one backbone variant on the pre-task of an experiment.
    Pretrain {
        #[arg(long, default_value = "residual")]
        variant: BackboneVariant,
    },
    /// Recompute batch-norm statistics of a checkpoint from k unlabeled images.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// HZDS file holding the unlabeled pool.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        chunk_size: Option<usize>,
    },
    /// Score a checkpoint against the reference baselines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Full protocol: pretrain, adapt over the k sweep, evaluate, report.
    Run,
    /// Re-render charts and summary tables from a finished run directory.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of every primitive and every backbone.
    Gradcheck,
    /// Metric and statistics oracles.
    Selftest,
}

enum Outcome {
    Done,
    VerificationFailed,
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(
    cli: &Cli,
    task: Option<TaskKind>,
    count: Option<usize>,
    id_offset: Option<u64>,
) -> Result<Outcome> {
    let mut cfg: GeneratorConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|source| Error::Json {
                context: path.display().to_string(),
                source,
            })?
        }
        None => GeneratorConfig::default(),
    };
    if let Some(t) = task {
        cfg.kind = t;
    }
    if let Some(n) = count {
        cfg.n_samples = n;
    }
    if let Some(o) = id_offset {
        cfg.id_offset = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let samples = generate(&cfg)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.hzds", cfg.kind)));
    write_dataset(&samples, &out)?;
    println!(
        "wrote {} {} images to {}",
        samples.len(),
        cfg.kind,
        out.display()
    );
    Ok(Outcome::Done)
}

fn cmd_pretrain(cli: &Cli, variant: BackboneVariant) -> Result<Outcome> {
    let cfg = experiment_config(cli)?;
    let net = cfg
        .variants
        .iter()
        .find(|v| v.variant == variant)
        .ok_or_else(|| {
            Error::contract(
                "pretrain",
                format!("variant {variant} is not in the config"),
            )
        })?;
    let plan = SeedPlan::new(&cfg, cfg.base_seed);
    let data = generate(&GeneratorConfig {
        seed: plan.pretask_data,
        ..cfg.pretask.clone()
    })?;
    let split = data.len() - cfg.validation_size;
    let model = Model::build(&plan.network(net))?;
    let (best, history) = pretrain(
        &model,
        &data[..split],
        &data[split..],
        &cfg.pretrain_config(plan.shuffle),
    )?;
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("pretrained"));
    let ckpt = dir.join(format!("{variant}.hzmd"));
    write_text(
        &dir.join(format!("{variant}_history.csv")),
        &history.to_csv(),
    )?;
    let meta = json!({ "seed": plan.seed, "variant": variant, "best_epoch": history.best_epoch });
    save_checkpoint(&best, &meta, &ckpt)?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "{variant}: {} epochs, best epoch {}, initial loss {:.5}, final train {:.5}, val {:.5}",
        history.epochs.len(),
        history.best_epoch,
        history.initial_train_loss,
        last.train_loss,
        last.val_loss
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(Outcome::Done)
}

fn cmd_adapt(
    cli: &Cli,
    checkpoint: &Path,
    data: &Path,
    k: usize,
    chunk_size: Option<usize>,
) -> Result<Outcome> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let pool = read_dataset(data)?;
    let channels = model.config().in_channels;
    let images = pool
        .iter()
        .map(|s| band_align(&s.image, channels))
        .collect::<Result<Vec<_>>>()?;
    let cfg = AdaptationConfig {
        k,
        image_selection_seed: cli.seed.unwrap_or(0),
        chunk_size,
        ..Default::default()
    };
    let adapted = adapt_from_pool(&model, &images, &cfg)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.with_extension(format!("k{k}.hzmd")));
    let meta = json!({ "source": meta, "adaptation": cfg, "pool": data.display().to_string() });
    save_checkpoint(&adapted, &meta, &out)?;
    println!(
        "adapted {} batch-norm layers from {k} images: {}",
        adapted.bn_states().len(),
        out.display()
    );
    Ok(Outcome::Done)
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, data: &Path) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let (model, _) = load_checkpoint(checkpoint)?;
    let samples = read_dataset(data)?;
    let seed = cli.seed.unwrap_or(0);
    let registry = BaselineRegistry::with_defaults();
    let baselines: Vec<Box<dyn Predictor>> = BaselineRegistry::REFERENCE
        .iter()
        .map(|name| registry.build(name, model.config(), seed))
        .collect::<Result<_>>()?;
    let opponents: Vec<&dyn Predictor> = baselines.iter().map(|b| b.as_ref()).collect();
    let name = model.config().variant.name();
    let e = evaluate(
        &ModelPredictor::new(name, model),
        &samples,
        &cfg.threshold,
        &opponents,
        cfg.rank_test,
    )?;
    println!(
        "mean balanced accuracy {:.4} (std {:.4}, {} defined, {} undefined)",
        e.summary.mean, e.summary.std, e.summary.n_defined, e.summary.n_undefined
    );
    for (opponent, r) in &e.significance {
        println!(
            "  vs {opponent}: W+ = {}, n = {}, p = {:.3e}, significant = {}",
            r.statistic, r.n_effective, r.p_value, r.significant
        );
    }
    if let Some(dir) = &cli.out {
        write_text(&dir.join("metrics.csv"), &records_csv(&e.records))?;
        write_text(&dir.join("significance.csv"), &e.significance_csv())?;
    }
    Ok(Outcome::Done)
}

fn print_table(table: &ResultsTable) {
    for a in &table.aggregates {
        println!(
            "{:<10} {:<15} k={:<3} mean {:.4} std {:.4}{}",
            a.task,
            a.variant,
            a.k,
            a.mean,
            a.std,
            if a.significant_vs_both() { " ***" } else { "" }
        );
    }
    let trend = table.trend();
    let up = trend.iter().filter(|t| t.improved).count();
    println!(
        "largest k at least zero-shot in {up} of {} (task, variant) cells",
        trend.len()
    );
}

fn cmd_run(cli: &Cli) -> Result<Outcome> {
    let cfg = experiment_config(cli)?;
    let outcome = run_experiment(&cfg)?;
    print_table(&outcome.table);
    for f in &outcome.failures {
        eprintln!(
            "failed: seed {} {:?} {:?} at {}: {}",
            f.seed, f.task, f.variant, f.stage, f.error
        );
    }
    println!("outputs in {}", outcome.out_dir.display());
    Ok(Outcome::Done)
}

fn cmd_report(cli: &Cli, input: &Path) -> Result<Outcome> {
    let read = |name: &str| {
        let p = input.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
    };
    let table = ResultsTable {
        rows: ResultsTable::parse_results_csv(&read("results.csv")?)?,
        aggregates: ResultsTable::parse_aggregate_csv(&read("aggregate.csv")?)?,
    };
    let out = cli.out.clone().unwrap_or_else(|| input.join("report"));
    let files = render_report(&table, &out)?;
    for f in files.charts.iter().chain(&files.summaries) {
        println!("{}", f.display());
    }
    Ok(Outcome::Done)
}

fn cmd_gradcheck() -> Result<Outcome> {
    let cases = gradcheck_suite()?;
    let mut worst: f64 = 0.0;
    for c in &cases {
        worst = worst.max(c.max_relative_error);
        println!(
            "{:<6} {:<24} max rel err {:.3e} ({} checked, {} at kinks)",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.max_relative_error,
            c.checked,
            c.skipped_at_kinks
        );
    }
    println!(
        "max relative error {worst:.3e} over {} cases (tolerance {GRADCHECK_TOLERANCE:e})",
        cases.len()
    );
    Ok(if cases.iter().all(|c| c.passed()) {
        Outcome::Done
    } else {
        Outcome::VerificationFailed
    })
}

fn cmd_selftest() -> Result<Outcome> {
    let results = selftest_suite();
    for r in &results {
        println!(
            "{:<6} {:<34} {}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    Ok(if results.iter().all(|r| r.passed) {
        Outcome::Done
    } else {
        Outcome::VerificationFailed
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Gen {
            task,
            count,
            id_offset,
        } => cmd_gen(&cli, *task, *count, *id_offset),
        Command::Pretrain { variant } => cmd_pretrain(&cli, *variant),
        Command::Adapt {
            checkpoint,
            data,
            k,
            chunk_size,
        } => cmd_adapt(&cli, checkpoint, data, *k, *chunk_size),
        Command::Eval { checkpoint, data } => cmd_eval(&cli, checkpoint, data),
        Command::Run => cmd_run(&cli),
        Command::Report { input } => cmd_report(&cli, input),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
