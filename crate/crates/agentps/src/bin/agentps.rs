//! Command-line entry point: dataset generation, annotation, training,
//! evaluation, and the three-variant ablation.
//!
//! Every command reads one TOML run config (flags override individual keys)
//! and writes into a run directory with a fixed layout: a verbatim copy of
//! the config, a manifest where applicable, `checkpoints/`, and `reports/`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure (non-finite loss abort).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use agentps::annotator::{
    read_annotations, remote_annotate, simulate_annotations, write_annotations, AnnotationResult,
    AnnotatorError, QuestionKind, QuestionTemplate, RemoteConfig,
};
use agentps::config::{ConfigError, RunConfig};
use agentps::data::{generate_dataset, read_jsonl, write_jsonl, DataError};
use agentps::eval::{
    best_flags, evaluate, report_from_predictions, reports_to_csv, run_ablation,
    AblationInputs, EvalError,
};
use agentps::model::{ModelBundle, Variant};
use agentps::rng::SeedStream;
use agentps::training::{
    load_checkpoint, prepare_samples, save_checkpoint, train, Adam, LabelSource, TrainError,
};

#[derive(Parser)]
#[command(name = "agentps", version, about = "Process-supervised multimodal classification")]
struct Cli {
    /// TOML run config; missing keys fall back to documented defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test JSONL plus a regeneration manifest
    Generate(GenerateArgs),
    /// Produce annotation JSONL for a dataset
    Annotate(AnnotateArgs),
    /// Train one variant and write per-epoch checkpoints
    Train(TrainArgs),
    /// Score a checkpoint on a test set
    Eval(EvalArgs),
    /// Train and evaluate all three variants over several seeds
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Test-set size; defaults to one fifth of the train size
    #[arg(long)]
    test_samples: Option<usize>,
    /// Overwrite existing dataset files
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Dataset JSONL to annotate
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["simulated", "remote"])]
    mode: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Training JSONL
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and the epoch log
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Label source: ground_truth, simulated, or remote
    #[arg(long)]
    labels: Option<LabelSource>,
    /// Annotation JSONL; required for non-ground-truth labels
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Checkpoint to continue from; epoch numbering carries on
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total epochs (including any already in the resumed checkpoint)
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test JSONL
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Training JSONL
    #[arg(long)]
    train: PathBuf,
    /// Test JSONL
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds; each trains all three variants
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    labels: Option<LabelSource>,
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnnotatorError> for CliError {
    fn from(e: AnnotatorError) -> Self {
        match e {
            AnnotatorError::InvalidProfile(_) | AnnotatorError::MissingEnv(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Numerics(_) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::SplitLeakage(_) | EvalError::BadPrecisionFloor(_)
            | EvalError::BadRecallFloor(_) => CliError::Usage(e.to_string()),
            EvalError::Train(t) => t.into(),
            EvalError::Numerics(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; anything else is a usage error
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mut config, raw) = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
        config.train.seed = seed;
        config.noise.seed = seed;
    }
    match cli.command {
        Command::Generate(args) => cmd_generate(&config, &raw, &args),
        Command::Annotate(args) => cmd_annotate(&config, &raw, &args),
        Command::Train(args) => cmd_train(&config, &raw, &args),
        Command::Eval(args) => cmd_eval(&config, &raw, &args),
        Command::Ablate(args) => cmd_ablate(&config, &raw, &args),
    }
}

/// Returns the effective config plus the verbatim file text (the defaults
/// rendered as TOML when no file was given) for provenance copies.
fn load_config(path: Option<&Path>) -> Result<(RunConfig, String), CliError> {
    match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| {
                CliError::Data(format!("cannot read config {}: {e}", p.display()))
            })?;
            let config = RunConfig::load(p)?;
            Ok((config, raw))
        }
        None => {
            let config = RunConfig::default();
            let raw = config.to_toml();
            Ok((config, raw))
        }
    }
}

fn prepare_out_dir(out: &Path, raw_config: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), raw_config)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    n_train: usize,
    n_test: usize,
    dataset: agentps::data::DatasetSpec,
    /// FNV-1a hash of the dataset section rendered as TOML
    spec_hash: String,
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn cmd_generate(config: &RunConfig, raw: &str, args: &GenerateArgs) -> Result<(), CliError> {
    let n_train = config.dataset.n_samples;
    let n_test = args.test_samples.unwrap_or(n_train / 5);
    let train_path = args.out.join("train.jsonl");
    let test_path = args.out.join("test.jsonl");
    for p in [&train_path, &test_path] {
        if p.exists() && !args.force {
            return Err(CliError::Usage(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    prepare_out_dir(&args.out, raw)?;

    // one contiguous generation, then a head/tail split: sample ids stay
    // globally unique so split-leakage checks are meaningful
    let mut spec = config.dataset.clone();
    spec.n_samples = n_train + n_test;
    let samples = generate_dataset(&spec)?;
    write_jsonl(&samples[..n_train], &train_path)?;
    write_jsonl(&samples[n_train..], &test_path)?;

    let dataset_toml = toml::to_string(&config.dataset)
        .map_err(|e| CliError::Usage(format!("cannot serialize dataset spec: {e}")))?;
    let manifest = Manifest {
        seed: spec.seed,
        n_train,
        n_test,
        dataset: config.dataset.clone(),
        spec_hash: fnv1a_hex(dataset_toml.as_bytes()),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(args.out.join("manifest.json"), manifest_json)?;
    println!(
        "generated {n_train} train + {n_test} test samples into {}",
        args.out.display()
    );
    Ok(())
}

fn cmd_annotate(config: &RunConfig, raw: &str, args: &AnnotateArgs) -> Result<(), CliError> {
    let samples = read_jsonl(&args.data)?;
    let results = match args.mode.as_str() {
        "simulated" => simulate_annotations(&samples, &config.noise)?,
        "remote" => {
            let remote = RemoteConfig::from_env()?;
            let templates: Vec<QuestionTemplate> = config
                .questions
                .ancillary
                .iter()
                .chain(std::iter::once(&config.questions.final_question))
                .map(|q| QuestionTemplate {
                    prompt: q.clone(),
                    kind: QuestionKind::Binary,
                })
                .collect();
            let (results, stats) = remote_annotate(&samples, &remote, &templates);
            eprintln!(
                "remote annotation: {} retries, {} failed samples",
                stats.retries, stats.failed_samples
            );
            results
        }
        _ => unreachable!("clap restricts the value"),
    };
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), raw)?;
        }
    }
    write_annotations(&results, &args.out)?;
    println!("wrote {} annotations to {}", results.len(), args.out.display());
    Ok(())
}

fn load_annotations_if_needed(
    labels: LabelSource,
    path: Option<&Path>,
) -> Result<Option<Vec<AnnotationResult>>, CliError> {
    if labels == LabelSource::GroundTruth {
        return Ok(None);
    }
    let path = path.ok_or_else(|| {
        CliError::Usage(format!("--labels {labels} requires --annotations"))
    })?;
    Ok(Some(read_annotations(path)?))
}

fn cmd_train(config: &RunConfig, raw: &str, args: &TrainArgs) -> Result<(), CliError> {
    let samples = read_jsonl(&args.data)?;
    let (mut model, vocab) = config.resolved_model();
    if let Some(v) = args.variant {
        model.variant = v;
    }
    let mut train_config = config.train.clone();
    if let Some(labels) = args.labels {
        train_config.label_source = labels;
    }
    if let Some(epochs) = args.epochs {
        train_config.epochs = epochs;
    }
    if model.variant == Variant::Vanilla
        && train_config.weights[..model.n_questions].iter().any(|&w| w != 0.0)
    {
        eprintln!(
            "note: variant vanilla has no ancillary heads; ancillary loss weights are ignored"
        );
    }
    let annotations =
        load_annotations_if_needed(train_config.label_source, args.annotations.as_deref())?;
    let prepared = prepare_samples::<f32>(
        &samples,
        annotations.as_deref(),
        &vocab,
        &model,
        &train_config,
    )?;

    prepare_out_dir(&args.out, raw)?;
    let ckpt_dir = args.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let (mut bundle, mut optimizer, start_epoch) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.bundle.config != model {
                return Err(CliError::Usage(
                    "checkpoint model config differs from the requested config".into(),
                ));
            }
            train_config.seed = ckpt.seed;
            (ckpt.bundle, ckpt.optimizer, ckpt.epoch)
        }
        None => {
            let seeds = SeedStream::new(train_config.seed).derive("model");
            let bundle: ModelBundle<f32> =
                ModelBundle::init(model.clone(), &seeds).map_err(TrainError::Model)?;
            let optimizer = Adam::new(&bundle);
            (bundle, optimizer, 0)
        }
    };

    let total_epochs = train_config.epochs;
    let log_path = args.out.join("epochs.csv");
    let mut log_csv = if start_epoch == 0 {
        let mut header = String::from("epoch,loss");
        for q in 1..=model.n_questions {
            header.push_str(&format!(",ce_q{q}"));
        }
        header.push_str(",ce_final\n");
        header
    } else {
        std::fs::read_to_string(&log_path).unwrap_or_default()
    };

    let mut one_epoch = train_config.clone();
    one_epoch.epochs = 1;
    for epoch in start_epoch..total_epochs {
        let logs = train(&mut bundle, &mut optimizer, &prepared, &one_epoch, epoch)?;
        let log = &logs[0];
        let mut row = format!("{},{:.6}", log.epoch, log.total_loss);
        for ce in &log.per_question {
            row.push_str(&format!(",{ce:.6}"));
        }
        row.push('\n');
        log_csv.push_str(&row);
        std::fs::write(&log_path, &log_csv)?;
        save_checkpoint(
            &ckpt_dir.join(format!("epoch{:04}.ckpt", epoch + 1)),
            &bundle,
            &optimizer,
            epoch + 1,
            train_config.seed,
        )?;
        save_checkpoint(&ckpt_dir.join("latest.ckpt"), &bundle, &optimizer, epoch + 1,
            train_config.seed)?;
        println!("epoch {} loss {:.6}", log.epoch, log.total_loss);
    }
    if start_epoch >= total_epochs {
        println!("checkpoint already at epoch {start_epoch}, nothing to train");
    }
    Ok(())
}

fn write_report(
    out: &Path,
    name: &str,
    report: &agentps::eval::VariantReport,
    n_questions: usize,
) -> Result<(), CliError> {
    let reports_dir = out.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(reports_dir.join(format!("{name}.json")), json)?;
    std::fs::write(
        reports_dir.join(format!("{name}.csv")),
        reports_to_csv(std::slice::from_ref(report), n_questions),
    )?;
    Ok(())
}

fn cmd_eval(config: &RunConfig, raw: &str, args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let test = read_jsonl(&args.test)?;
    let (_, vocab) = config.resolved_model();
    prepare_out_dir(&args.out, raw)?;
    let (preds, question_accuracy) = evaluate(&ckpt.bundle, &vocab, &test)?;
    let report = report_from_predictions(
        ckpt.bundle.config.variant,
        ckpt.seed,
        &preds,
        question_accuracy,
    )?;
    write_report(&args.out, "eval", &report, ckpt.bundle.config.n_questions)?;
    println!(
        "{}: f1 {} (best {}) over {} test samples",
        report.variant,
        agentps::eval::pct(report.f1),
        agentps::eval::pct(report.f1_best),
        test.len()
    );
    Ok(())
}

fn cmd_ablate(config: &RunConfig, raw: &str, args: &AblateArgs) -> Result<(), CliError> {
    let train_set = read_jsonl(&args.train)?;
    let test_set = read_jsonl(&args.test)?;
    let (model, vocab) = config.resolved_model();
    let mut train_config = config.train.clone();
    if let Some(labels) = args.labels {
        train_config.label_source = labels;
    }
    let annotations =
        load_annotations_if_needed(train_config.label_source, args.annotations.as_deref())?;
    prepare_out_dir(&args.out, raw)?;

    let seeds: Vec<u64> = (0..args.seeds).map(|i| train_config.seed + i).collect();
    let inputs = AblationInputs {
        train: &train_set,
        test: &test_set,
        vocab: &vocab,
        model: &model,
        train_config: &train_config,
        annotations: annotations.as_deref(),
    };
    let outcome = run_ablation(&inputs, &seeds, |report| {
        println!(
            "{} seed {}: f1 {}",
            report.variant,
            report.seed,
            agentps::eval::pct(report.f1)
        );
    })?;

    for report in &outcome.reports {
        let name = format!("{}-seed{}", report.variant, report.seed);
        write_report(&args.out, &name, report, model.n_questions)?;
    }
    let reports_dir = args.out.join("reports");
    std::fs::write(
        reports_dir.join("all.csv"),
        reports_to_csv(&outcome.reports, model.n_questions),
    )?;

    #[derive(Serialize)]
    struct Summary<'a> {
        summary: &'a agentps::eval::AblationSummary,
        best_flags: Vec<(String, Variant)>,
        seeds: &'a [u64],
    }
    let flags = best_flags(&outcome.reports);
    let summary_json = serde_json::to_string_pretty(&Summary {
        summary: &outcome.summary,
        best_flags: flags,
        seeds: &seeds,
    })
    .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(reports_dir.join("summary.json"), summary_json)?;

    let s = &outcome.summary;
    for (variant, f1) in &s.mean_f1 {
        println!("mean f1 {}: {}", variant, agentps::eval::pct(*f1));
    }
    println!(
        "gaps: multitask-vanilla {:+.1}, agentps-multitask {:+.1}, agentps-vanilla {:+.1}",
        100.0 * s.gap_multitask_vanilla,
        100.0 * s.gap_agentps_multitask,
        100.0 * s.gap_agentps_vanilla
    );
    Ok(())
}
