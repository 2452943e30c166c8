//! Command-line front end. Exit codes: 0 success, 1 user error, 2 internal
//! error.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::evaluator::{
    export_attention_map, export_memory_map, generalization_eval, solver_for, write_report_csv, EvalError,
    GeneralizationSpec,
};
use crate::experiments::{
    builtin_pipeline, builtin_pipelines, run_pipeline, EncoderSource, ExperimentError, ExperimentPipeline, RunOptions,
    StageOutcome, StageSpec, TrainOverrides,
};
use crate::memory::ShiftOffsets;
use crate::model::{Handoff, SolverSpec, PARAM_BUDGET};
use crate::tasks::{generate, generate_with_len, read_fixtures, write_fixtures, GenConfig, Task, TaskError};
use crate::trainer::TrainError;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "MAES_SEED";

/// Identifies the binary that produced an artifact.
pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    match option_env!("MAES_BUILD_ID") {
        Some(id) => format!("{}-{}+{id}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        None => format!("{}-{}-{profile}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "maes", version, about = "Memory-augmented encoder-solver experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a built-in or file-defined pipeline.
    Train(TrainArgs),
    /// Train a fresh solver on top of a frozen encoder checkpoint.
    Transfer(TransferArgs),
    /// Measure length generalization of a trained checkpoint.
    Eval(EvalArgs),
    /// Print parameter names, shapes, counts and provenance.
    Inspect(InspectArgs),
    /// Write task samples in the binary fixture format.
    Fixtures(FixtureArgs),
    /// List built-in pipelines or print one as config text.
    Pipelines(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Run seed; falls back to $MAES_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub pipeline: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Run only these stages (repeatable).
    #[arg(long = "stage")]
    pub stages: Vec<String>,
    /// Override every stage's iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Override every stage's validation interval (0 disables).
    #[arg(long)]
    pub validate_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub task: Task,
    #[arg(long, value_parser = parse_handoff)]
    pub handoff: Option<Handoff>,
    /// Shift radius of the solver's attention.
    #[arg(long)]
    pub shift: Option<u32>,
    /// Let the encoder keep training.
    #[arg(long)]
    pub no_freeze: bool,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 1000)]
    pub length: usize,
    #[arg(long, default_value_t = 1024)]
    pub memory: usize,
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    /// CSV report path; defaults to the checkpoint path with `.eval.csv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write attention and memory maps of one sample here.
    #[arg(long)]
    pub export_maps: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub count: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Print this pipeline's config text.
    #[arg(long)]
    pub show: Option<String>,
}

fn parse_handoff(s: &str) -> Result<Handoff, String> {
    Handoff::parse(s).ok_or_else(|| format!("expected start or end, got `{s}`"))
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) => write!(f, "error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(TrainError::NonFinite { .. }) | ExperimentError::FrozenDrift { .. } => {
                CliError::Internal(e.to_string())
            }
            ExperimentError::Train(TrainError::Io(_)) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn resolve_seed(arg: &SeedArg) -> Result<u64, CliError> {
    if let Some(s) = arg.seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::User(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    build: String,
    args: Vec<String>,
    config: T,
}

fn write_manifest<T: Serialize>(
    path: &Path,
    command: &str,
    seed: u64,
    args: &[String],
    config: T,
) -> Result<(), CliError> {
    let m = Manifest {
        command,
        seed,
        build: build_id(),
        args: args.to_vec(),
        config,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    tasks: Vec<Task>,
    converged: bool,
    iterations: usize,
    final_ema: f64,
    final_val_accuracy: Option<f64>,
    checkpoint: Option<String>,
}

#[derive(Serialize)]
struct RunSummary {
    pipeline: String,
    seed: u64,
    stages: Vec<StageSummary>,
}

fn summarize(pipeline: &str, seed: u64, outcomes: &[StageOutcome]) -> RunSummary {
    RunSummary {
        pipeline: pipeline.to_string(),
        seed,
        stages: outcomes
            .iter()
            .map(|o| StageSummary {
                stage: o.stage.clone(),
                tasks: o.tasks.clone(),
                converged: o.report.converged,
                iterations: o.report.iterations,
                final_ema: o.report.final_ema,
                final_val_accuracy: o.final_validation_accuracy(),
                checkpoint: o
                    .checkpoint
                    .as_ref()
                    .and_then(|p| p.file_name())
                    .map(|f| f.to_string_lossy().into_owned()),
            })
            .collect(),
    }
}

fn run_and_report(
    pipeline: &ExperimentPipeline,
    seed: u64,
    out: &Path,
    command: &str,
    args: &[String],
    out_stream: &mut dyn Write,
) -> Result<(), CliError> {
    crate::experiments::check_dependencies(pipeline, out)?;
    std::fs::create_dir_all(out)?;
    write_manifest(&out.join("manifest.json"), command, seed, args, pipeline.to_text())?;
    let opts = RunOptions {
        seed,
        out_dir: out.to_path_buf(),
        write_metrics: true,
    };
    let outcomes = run_pipeline(pipeline, &opts)?;
    let summary = summarize(&pipeline.name, seed, &outcomes);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(out.join("summary.json"), text + "\n")?;
    for (s, o) in summary.stages.iter().zip(&outcomes) {
        writeln!(
            out_stream,
            "{:<16} converged={} iterations={} ema={:.3e} val_acc={} ({} ms)",
            s.stage,
            s.converged,
            s.iterations,
            s.final_ema,
            s.final_val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            o.report.wall_ms
        )?;
    }
    Ok(())
}

fn apply_flag_overrides(stages: &mut [StageSpec], max_iters: Option<usize>, validate_every: Option<usize>) {
    for s in stages {
        if max_iters.is_some() {
            s.overrides.max_iters = max_iters;
        }
        if validate_every.is_some() {
            s.overrides.validate_every = validate_every;
        }
    }
}

fn cmd_train(a: &TrainArgs, args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let seed = resolve_seed(&a.seed)?;
    let mut pipeline = match (&a.pipeline, &a.config) {
        (Some(name), _) => builtin_pipeline(name)?,
        (None, Some(path)) => ExperimentPipeline::from_file(path).map_err(|e| match e {
            ExperimentError::Io(io) => CliError::User(format!("{}: {io}", path.display())),
            ExperimentError::Parse { .. } => CliError::User(format!("{}: {e}", path.display())),
            other => other.into(),
        })?,
        (None, None) => return Err(CliError::User("give --pipeline or --config".into())),
    };
    if !a.stages.is_empty() {
        let names: Vec<&str> = a.stages.iter().map(String::as_str).collect();
        pipeline = pipeline.only(&names)?;
    }
    apply_flag_overrides(&mut pipeline.stages, a.max_iters, a.validate_every);
    pipeline.check()?;
    run_and_report(&pipeline, seed, &a.out, "train", args, out)
}

fn cmd_transfer(a: &TransferArgs, args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let seed = resolve_seed(&a.seed)?;
    let encoder =
        std::fs::canonicalize(&a.encoder).map_err(|e| CliError::User(format!("{}: {e}", a.encoder.display())))?;
    let mut solver = SolverSpec::for_task(a.task);
    if let Some(h) = a.handoff {
        solver = solver.with_handoff(h);
    }
    if let Some(r) = a.shift {
        if r == 0 {
            return Err(CliError::User("--shift must be at least 1".into()));
        }
        solver = solver.with_shift(ShiftOffsets::symmetric(r));
    }
    let mut stages = vec![StageSpec {
        name: a.task.name().to_string(),
        solvers: vec![solver],
        encoder: EncoderSource::Checkpoint(encoder.to_string_lossy().into_owned()),
        freeze_encoder: !a.no_freeze,
        overrides: TrainOverrides::default(),
        checkpoint_out: Some(format!("{}.ckpt", a.task)),
    }];
    apply_flag_overrides(&mut stages, a.max_iters, a.validate_every);
    let pipeline = ExperimentPipeline {
        name: "transfer".into(),
        description: format!("transfer from {}", a.encoder.display()),
        stages,
    };
    pipeline.check()?;
    run_and_report(&pipeline, seed, &a.out, "transfer", args, out)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: String,
    spec: &'a GeneralizationSpec,
}

fn cmd_eval(a: &EvalArgs, args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let seed = resolve_seed(&a.seed)?;
    let spec = GeneralizationSpec {
        task: a.task,
        length: a.length,
        memory: a.memory,
        batch_size: a.batch_size,
        batches: a.batches,
        seed,
        workers: a.workers,
    };
    spec.validate()?;
    let model = Checkpoint::load(&a.checkpoint)?.to_assembly()?;
    let idx = solver_for(&model, a.task)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_extension("eval.csv"));
    write_manifest(
        &report_path.with_extension("manifest.json"),
        "eval",
        seed,
        args,
        EvalEcho {
            checkpoint: a.checkpoint.display().to_string(),
            spec: &spec,
        },
    )?;
    let report = generalization_eval(&model, &spec)?;
    let mut w = BufWriter::new(File::create(&report_path)?);
    write_report_csv(&mut w, std::slice::from_ref(&report))?;
    w.flush()?;
    writeln!(
        out,
        "task={} length={} memory={} samples={} accuracy={:.6} stderr={:.2e} exact_match={:.4} ({} ms)",
        a.task,
        a.length,
        a.memory,
        a.batches * a.batch_size,
        report.mean_accuracy,
        report.stderr,
        report.exact_match,
        report.wall_ms
    )?;
    if let Some(dir) = &a.export_maps {
        std::fs::create_dir_all(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = generate_with_len(a.task, a.length, &GenConfig::fixed(a.length), &mut rng);
        let (_, rollout) = model
            .infer(idx, &s, a.memory, true)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        export_attention_map(&rollout.write_attention, dir.join("write_attention"))?;
        export_attention_map(&rollout.read_attention, dir.join("read_attention"))?;
        if let Some(m) = &rollout.encoded_memory {
            export_memory_map(m, dir.join("memory"))?;
        }
        writeln!(out, "maps written to {}", dir.display())?;
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let p = &ck.provenance;
    writeln!(
        out,
        "provenance: pipeline={} stage={} seed={} iterations={} converged={}",
        p.pipeline, p.stage, p.seed, p.iterations, p.converged
    )?;
    writeln!(
        out,
        "dims: word={} hidden={} mlp_hidden={}",
        ck.dims.word_size, ck.dims.hidden_size, ck.dims.mlp_hidden
    )?;
    for s in &ck.solvers {
        writeln!(
            out,
            "solver {}: task={} handoff={} shifts={:?}",
            s.id,
            s.task,
            s.handoff.name(),
            s.shift.as_slice()
        )?;
    }
    for t in &ck.tensors {
        writeln!(
            out,
            "{:<24} {:<18} {:?} {}",
            t.name,
            t.group,
            t.tensor.shape(),
            t.tensor.len()
        )?;
    }
    writeln!(out, "total parameters: {} (budget {PARAM_BUDGET})", ck.scalar_count())?;
    Ok(())
}

#[derive(Serialize)]
struct FixtureEcho {
    task: Task,
    count: usize,
    min_len: usize,
    max_len: usize,
}

fn cmd_fixtures(a: &FixtureArgs, args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let seed = resolve_seed(&a.seed)?;
    let gen = GenConfig {
        min_len: a.min_len,
        max_len: a.max_len,
        ..GenConfig::default()
    };
    gen.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = (0..a.count).map(|_| generate(a.task, &gen, &mut rng)).collect();
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_fixtures(&mut w, a.task, &samples)?;
    w.flush()?;
    drop(w);
    let (task, back) = read_fixtures(File::open(&a.out)?)?;
    if task != a.task || back != samples {
        return Err(CliError::Internal("fixture file does not read back identically".into()));
    }
    write_manifest(
        &a.out.with_extension("manifest.json"),
        "fixtures",
        seed,
        args,
        FixtureEcho {
            task: a.task,
            count: a.count,
            min_len: a.min_len,
            max_len: a.max_len,
        },
    )?;
    writeln!(out, "wrote {} {} samples to {}", a.count, a.task, a.out.display())?;
    Ok(())
}

fn cmd_pipelines(a: &PipelineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    match &a.show {
        Some(name) => write!(out, "{}", builtin_pipeline(name)?.to_text())?,
        None => {
            for p in builtin_pipelines() {
                let stages: Vec<&str> = p.stages.iter().map(|s| s.name.as_str()).collect();
                writeln!(out, "{:<18} {} [{}]", p.name, p.description, stages.join(", "))?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let echo: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    1
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &echo, out),
        Command::Transfer(a) => cmd_transfer(a, &echo, out),
        Command::Eval(a) => cmd_eval(a, &echo, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Fixtures(a) => cmd_fixtures(a, &echo, out),
        Command::Pipelines(a) => cmd_pipelines(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
