//! The `caat` command line: `synth`, `preprocess`, `pretrain`, `embed`,
//! `eval` and `ablate`.
//!
//! Settings resolve as flags > `--config` file > defaults. Every run writes
//! the resolved settings to `<out>/run.lock`, which can be passed back as
//! `--config` to repeat the run. Failures print `ERROR <code>: <message>`
//! to standard error and exit with 1 (usage), 2 (data or validation) or
//! 3 (numeric failure).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_processed, make_downstream_sample, run_pipeline, write_processed, write_raw_csv,
    DataError, Dataset, DatasetSchema, LabeledSample, SynthConfig, Task,
};
use crate::downstream::{
    extract_embeddings, load_embeddings, raw_sequences, run_benchmark, save_embeddings, BenchmarkTask,
    ClassifierKind, DownstreamError, EvalReport, FoldSpec, LinearHyper, RecurrentHyper, Variant,
};
use crate::model::{load_checkpoint, save_checkpoint, Ablation, ModelConfig, ModelError};
use crate::pretrain::{pretrain, PretrainError, PretrainPlan};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const LOCK_FILE: &str = "run.lock";

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced this file; informational.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Extra pipelines for `eval`, as `name=path` or a bare path (named `caat`).
    pub embeddings: Vec<String>,
    pub tasks: Vec<String>,
    /// `linear` and/or `recurrent`.
    pub classifiers: Vec<String>,
    pub embedding_fraction: f64,
    pub model: ModelConfig,
    pub pretrain: PretrainPlan,
    pub folds: FoldSpec,
    pub synth: SynthConfig,
    pub linear: LinearHyper,
    pub recurrent: RecurrentHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            data: None,
            schema: None,
            checkpoint: None,
            out: None,
            embeddings: Vec::new(),
            tasks: vec![Task::Synthetic.to_string()],
            classifiers: vec!["linear".into(), "recurrent".into()],
            embedding_fraction: 0.7,
            model: ModelConfig::default(),
            pretrain: PretrainPlan::default(),
            folds: FoldSpec::default(),
            synth: SynthConfig::default(),
            linear: LinearHyper::default(),
            recurrent: RecurrentHyper::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn task_list(&self) -> Result<Vec<Task>, CliError> {
        self.tasks
            .iter()
            .map(|t| t.parse().map_err(|e: DataError| CliError::usage(e.to_string())))
            .collect()
    }

    pub fn classifier_list(&self) -> Result<Vec<ClassifierKind>, CliError> {
        self.classifiers
            .iter()
            .map(|c| match c.as_str() {
                "linear" => Ok(ClassifierKind::Linear(self.linear)),
                "recurrent" => Ok(ClassifierKind::Recurrent(self.recurrent)),
                other => Err(CliError::usage(format!("unknown classifier `{other}`"))),
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::Model(m) => m.into(),
            PretrainError::NonFinite { .. } => Self {
                code: EXIT_NUMERIC,
                message: e.to_string(),
            },
            PretrainError::Plan(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::Model(m) => m.into(),
            DownstreamError::NonFinite(_) => Self {
                code: EXIT_NUMERIC,
                message: e.to_string(),
            },
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "caat", version, about = "Multimodal longitudinal EHR embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a synthetic raw dataset and its schema.
    Synth,
    /// Clean, impute, encode, split and normalize a raw dataset.
    Preprocess,
    /// Pre-train on a processed embedding-task dataset.
    Pretrain,
    /// Encode a processed downstream dataset with a checkpoint.
    Embed,
    /// Benchmark raw features and embeddings on downstream tasks.
    Eval,
    /// Pre-train, embed and evaluate the full model and both ablations.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Pretrain => "pretrain",
            Command::Embed => "embed",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input dataset (raw CSV, processed CSV, or a preprocess output directory for `ablate`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// mortality, los, diagnosis or synthetic.
    #[arg(long, global = true)]
    task: Option<String>,
    /// full, no-ca or recon.
    #[arg(long, global = true)]
    ablation: Option<String>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Extra `eval` pipeline: `name=embeddings.csv`. Repeatable.
    #[arg(long, global = true)]
    embeddings: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

fn resolve(flags: &Flags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::from_toml(
            &fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.folds.seed = seed;
    }
    for (slot, flag) in [
        (&mut cfg.data, &flags.data),
        (&mut cfg.schema, &flags.schema),
        (&mut cfg.checkpoint, &flags.checkpoint),
        (&mut cfg.out, &flags.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(t) = &flags.task {
        cfg.tasks = vec![t.clone()];
    }
    if let Some(a) = &flags.ablation {
        cfg.model.ablation = a.parse().map_err(CliError::usage)?;
    }
    if let Some(k) = flags.folds {
        cfg.folds.folds = k;
    }
    if let Some(r) = flags.repeats {
        cfg.folds.repeats = r;
    }
    if !flags.embeddings.is_empty() {
        cfg.embeddings.clone_from(&flags.embeddings);
    }
    cfg.task_list()?;
    cfg.classifier_list()?;
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

/// Creates `dir` and refuses to clobber any of `files` (plus the lock
/// file) unless forced.
fn prepare_out(dir: &Path, files: &[String], force: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for f in files.iter().map(String::as_str).chain([LOCK_FILE]) {
        let p = dir.join(f);
        if p.exists() && !force {
            return Err(CliError::usage(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn write_lock(dir: &Path, cfg: &RunConfig, command: Command) -> Result<(), CliError> {
    let mut echo = cfg.clone();
    echo.command = Some(command.name().into());
    fs::write(dir.join(LOCK_FILE), echo.to_toml())?;
    Ok(())
}

fn labeled(data: &Dataset, task: Task) -> Result<Vec<LabeledSample>, CliError> {
    Ok(data
        .samples
        .iter()
        .map(|s| make_downstream_sample(s, task))
        .collect::<Result<Vec<_>, _>>()?)
}

fn model_for(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    let (f1, f2) = data.widths();
    ModelConfig {
        f1,
        f2,
        ..cfg.model.clone()
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    prepare_out(out, &["raw.csv".into(), "schema.toml".into()], force)?;
    write_lock(out, cfg, Command::Synth)?;
    let schema = cfg.synth.schema();
    let data = generate_synthetic(&cfg.synth, cfg.seed)?;
    let mut buf = Vec::new();
    write_raw_csv(&mut buf, &data, &schema)?;
    fs::write(out.join("raw.csv"), buf)?;
    fs::write(out.join("schema.toml"), schema.to_toml())?;
    info!("wrote {} stays to {}", data.len(), out.join("raw.csv").display());
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let files = ["embedding.csv", "downstream.csv", "manifest.csv", "normstats.csv", "excluded.csv"].map(String::from);
    prepare_out(out, &files, force)?;
    write_lock(out, cfg, Command::Preprocess)?;
    let schema = DatasetSchema::load(required(&cfg.schema, "schema")?)?;
    let raw = crate::data::ingest_csv(required(&cfg.data, "data")?, &schema)?;
    let result = run_pipeline(raw, &schema, cfg.embedding_fraction, cfg.seed)?;
    for (name, set) in [("embedding.csv", &result.embedding), ("downstream.csv", &result.downstream)] {
        let mut buf = Vec::new();
        write_processed(&mut buf, set)?;
        fs::write(out.join(name), buf)?;
    }
    result.manifest.save(&out.join("manifest.csv"))?;
    result.norm.save(&out.join("normstats.csv"))?;
    let mut excluded = String::from("stay_id,subject_id,reason\n");
    for d in &result.dropped {
        excluded.push_str(&format!("{},{},{}\n", d.stay_id, d.subject_id, d.reason));
    }
    fs::write(out.join("excluded.csv"), excluded)?;
    info!(
        "kept {} embedding and {} downstream stays, excluded {}",
        result.embedding.len(),
        result.downstream.len(),
        result.dropped.len()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    prepare_out(out, &["checkpoint.caat".into(), "losscurve.csv".into()], force)?;
    write_lock(out, cfg, Command::Pretrain)?;
    let data = load_processed(required(&cfg.data, "data")?)?;
    let c = model_for(cfg, &data);
    let (weights, curve) = pretrain(&data.samples, &c, &cfg.pretrain)?;
    save_checkpoint(&weights, &out.join("checkpoint.caat"))?;
    curve.save(&out.join("losscurve.csv"))?;
    info!("best epoch {} with validation MSE {:.6}", curve.best_epoch, curve.best_val_mse());
    Ok(())
}

fn single_task(cfg: &RunConfig) -> Result<Task, CliError> {
    match cfg.task_list()?.as_slice() {
        [t] => Ok(*t),
        _ => Err(CliError::usage("this command takes exactly one task")),
    }
}

fn cmd_embed(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    prepare_out(out, &["embeddings.csv".into()], force)?;
    write_lock(out, cfg, Command::Embed)?;
    let weights = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = load_processed(required(&cfg.data, "data")?)?;
    let samples = labeled(&data, single_task(cfg)?)?;
    let emb = extract_embeddings(&samples, weights.encoder_view())?;
    save_embeddings(&emb, &out.join("embeddings.csv"))?;
    info!("embedded {} stays", emb.len());
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Result<(), CliError> {
    fs::write(out.join("report.csv"), report.to_csv())?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    prepare_out(out, &["report.csv".into(), "report.txt".into()], force)?;
    write_lock(out, cfg, Command::Eval)?;
    let data = cfg.data.as_deref().map(load_processed).transpose()?;
    let mut extra = Vec::new();
    for spec in &cfg.embeddings {
        let (name, path) = spec.split_once('=').unwrap_or(("caat", spec));
        extra.push(Variant {
            name: name.into(),
            samples: load_embeddings(Path::new(path))?,
        });
    }
    if data.is_none() && extra.is_empty() {
        return Err(CliError::usage("eval needs --data and/or --embeddings"));
    }
    let mut tasks = Vec::new();
    for task in cfg.task_list()? {
        let mut variants = Vec::new();
        if let Some(d) = &data {
            variants.push(Variant {
                name: "raw".into(),
                samples: raw_sequences(&labeled(d, task)?),
            });
        }
        variants.extend(extra.iter().cloned());
        tasks.push(BenchmarkTask {
            task: task.to_string(),
            variants,
        });
    }
    let report = run_benchmark(&tasks, &cfg.classifier_list()?, &cfg.folds)?;
    write_report(out, &report)
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let mut files = vec!["report.csv".to_string(), "report.txt".to_string()];
    for a in Ablation::ALL {
        files.push(format!("checkpoint-{}.caat", a.label()));
        files.push(format!("losscurve-{}.csv", a.label()));
    }
    prepare_out(out, &files, force)?;
    write_lock(out, cfg, Command::Ablate)?;
    let dir = required(&cfg.data, "data")?;
    let embedding = load_processed(&dir.join("embedding.csv"))?;
    let downstream = load_processed(&dir.join("downstream.csv"))?;
    let task_list = cfg.task_list()?;
    let mut tasks: Vec<BenchmarkTask> = task_list
        .iter()
        .map(|t| BenchmarkTask {
            task: t.to_string(),
            variants: Vec::new(),
        })
        .collect();
    for a in Ablation::ALL {
        let c = model_for(cfg, &embedding).with_ablation(a);
        let (weights, curve) = pretrain(&embedding.samples, &c, &cfg.pretrain)?;
        save_checkpoint(&weights, &out.join(format!("checkpoint-{}.caat", a.label())))?;
        curve.save(&out.join(format!("losscurve-{}.csv", a.label())))?;
        for (task, bt) in task_list.iter().zip(&mut tasks) {
            bt.variants.push(Variant {
                name: a.label().into(),
                samples: extract_embeddings(&labeled(&downstream, *task)?, weights.encoder_view())?,
            });
        }
    }
    let report = run_benchmark(&tasks, &[ClassifierKind::Linear(cfg.linear)], &cfg.folds)?;
    write_report(out, &report)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.flags)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let force = cli.flags.force;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &out, force),
        Command::Preprocess => cmd_preprocess(&cfg, &out, force),
        Command::Pretrain => cmd_pretrain(&cfg, &out, force),
        Command::Embed => cmd_embed(&cfg, &out, force),
        Command::Eval => cmd_eval(&cfg, &out, force),
        Command::Ablate => cmd_ablate(&cfg, &out, force),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAAT_LOG", "info"))
        .format_target(false)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("ERROR {EXIT_USAGE}: {}", msg.trim_start_matches("error: ").trim_end());
            return EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code, e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 3\ntasks = [\"mortality\"]\n[folds]\nfolds = 4\n").unwrap();
        let flags = Flags {
            config: Some(path),
            seed: Some(9),
            repeats: Some(2),
            ablation: Some("recon".into()),
            ..Default::default()
        };
        let cfg = resolve(&flags).unwrap();
        assert_eq!((cfg.seed, cfg.pretrain.seed, cfg.folds.seed), (9, 9, 9));
        assert_eq!((cfg.folds.folds, cfg.folds.repeats), (4, 2));
        assert_eq!(cfg.tasks, vec!["mortality".to_string()]);
        assert_eq!(cfg.model.ablation, Ablation::Reconstruction);
    }

    #[test]
    fn unknown_keys_and_values_are_usage_errors() {
        assert_eq!(RunConfig::from_toml("bogus = 1").unwrap_err().code, EXIT_USAGE);
        let flags = Flags {
            task: Some("weather".into()),
            ..Default::default()
        };
        assert_eq!(resolve(&flags).unwrap_err().code, EXIT_USAGE);
    }
}
