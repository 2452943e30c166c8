//! Declarative multi-stage experiments.
//!
//! A pipeline is a list of stages. Each stage builds a fresh assembly for
//! its solvers, optionally loads (and freezes) an encoder from a checkpoint,
//! trains, and optionally writes a checkpoint that later stages can load.
//!
//! Pipelines are written as plain text:
//!
//! ```text
//! # comment
//! name = my_pipeline
//! description = free text
//!
//! [stage joint]
//! tasks = serial, reverse
//! checkpoint_out = encoder.ckpt
//!
//! [stage odd]
//! tasks = odd
//! encoder = encoder.ckpt
//! freeze = encoder
//! shift = 1
//! handoff.odd = start
//! max_iters = 30000
//! ```
//!
//! Stage keys: `tasks`, `encoder` (`fresh` or a checkpoint file name
//! relative to the output directory), `freeze` (`encoder` or `none`),
//! `checkpoint_out`, `handoff` / `handoff.<task>` (`start` or `end`),
//! `shift` / `shift.<task>` (shift radius), and the training overrides
//! `max_iters`, `batch_size`, `memory_size`, `min_len`, `max_len`,
//! `validate_every`, `val_batch`, `val_len`, `val_memory`, `threshold`,
//! `lr`, `clip_norm`, `ema_half_life`.

use crate::checkpoint::{Checkpoint, CheckpointError, Provenance};
use crate::memory::ShiftOffsets;
use crate::model::{Handoff, MaesAssembly, ModelDims, ModelError, SolverSpec, ENCODER_GROUP};
use crate::tasks::Task;
use crate::trainer::{freeze, train, TrainConfig, TrainError, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown pipeline `{name}`; available: {available}")]
    UnknownPipeline { name: String, available: String },
    #[error("stage `{stage}` needs checkpoint {path}, which neither exists nor is produced by an earlier stage")]
    MissingCheckpoint { stage: String, path: PathBuf },
    #[error("invalid pipeline: {0}")]
    Invalid(String),
    #[error("stage `{stage}` changed frozen encoder parameters")]
    FrozenDrift { stage: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a stage's encoder comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderSource {
    Fresh,
    /// Checkpoint file name, relative to the run's output directory.
    Checkpoint(String),
}

/// Optional replacements for [`TrainConfig`] fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub max_iters: Option<usize>,
    pub batch_size: Option<usize>,
    pub memory_size: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub validate_every: Option<usize>,
    pub val_batch: Option<usize>,
    pub val_len: Option<usize>,
    pub val_memory: Option<usize>,
    pub threshold: Option<f64>,
    pub lr: Option<f64>,
    pub clip_norm: Option<f64>,
    pub ema_half_life: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(
            max_iters,
            batch_size,
            memory_size,
            min_len,
            max_len,
            validate_every,
            val_batch,
            val_len,
            val_memory,
            threshold,
            clip_norm,
            ema_half_life
        );
        if let Some(lr) = self.lr {
            cfg.adam.lr = lr;
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, String> {
            v.parse()
                .map(Some)
                .map_err(|_| format!("`{key}` expects a number, got `{v}`"))
        }
        match key {
            "max_iters" => self.max_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "memory_size" => self.memory_size = num(key, value)?,
            "min_len" => self.min_len = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "validate_every" => self.validate_every = num(key, value)?,
            "val_batch" => self.val_batch = num(key, value)?,
            "val_len" => self.val_len = num(key, value)?,
            "val_memory" => self.val_memory = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "ema_half_life" => self.ema_half_life = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub solvers: Vec<SolverSpec>,
    pub encoder: EncoderSource,
    pub freeze_encoder: bool,
    pub overrides: TrainOverrides,
    pub checkpoint_out: Option<String>,
}

impl StageSpec {
    pub fn tasks(&self) -> Vec<Task> {
        self.solvers.iter().map(|s| s.task).collect()
    }

    /// Training config for this stage under the run seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_task(self.solvers[0].task);
        self.overrides.apply(&mut cfg);
        cfg.seed = stage_seed(seed, &self.name) ^ 0x7A11;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPipeline {
    pub name: String,
    pub description: String,
    pub stages: Vec<StageSpec>,
}

impl ExperimentPipeline {
    /// Parses the plain-text pipeline format.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        Parser::default().run(text)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// The same pipeline restricted to the named stages, in pipeline order.
    pub fn only(&self, names: &[&str]) -> Result<Self, ExperimentError> {
        for n in names {
            if self.stage(n).is_none() {
                return Err(ExperimentError::Invalid(format!("no stage `{n}` in {}", self.name)));
            }
        }
        Ok(Self {
            stages: self
                .stages
                .iter()
                .filter(|s| names.contains(&s.name.as_str()))
                .cloned()
                .collect(),
            ..self.clone()
        })
    }

    /// Structural checks that need no filesystem.
    pub fn check(&self) -> Result<(), ExperimentError> {
        if self.stages.is_empty() {
            return Err(ExperimentError::Invalid(format!(
                "pipeline {} has no stages",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &self.stages {
            if !seen.insert(&s.name) {
                return Err(ExperimentError::Invalid(format!("duplicate stage `{}`", s.name)));
            }
            if s.solvers.is_empty() {
                return Err(ExperimentError::Invalid(format!("stage `{}` lists no tasks", s.name)));
            }
            if s.solvers.len() > 1 && s.solvers.iter().any(|p| p.task.has_aux()) {
                return Err(ExperimentError::Invalid(format!(
                    "stage `{}`: joint training supports recall tasks only",
                    s.name
                )));
            }
            if s.freeze_encoder && s.encoder == EncoderSource::Fresh {
                return Err(ExperimentError::Invalid(format!(
                    "stage `{}` freezes a freshly initialized encoder",
                    s.name
                )));
            }
            s.train_config(0).validate()?;
        }
        Ok(())
    }

    /// Renders the pipeline back to its text form.
    pub fn to_text(&self) -> String {
        let mut out = format!("name = {}\n", self.name);
        if !self.description.is_empty() {
            out += &format!("description = {}\n", self.description);
        }
        for s in &self.stages {
            out += &format!("\n[stage {}]\n", s.name);
            let tasks: Vec<&str> = s.solvers.iter().map(|p| p.task.name()).collect();
            out += &format!("tasks = {}\n", tasks.join(", "));
            if let EncoderSource::Checkpoint(p) = &s.encoder {
                out += &format!("encoder = {p}\n");
            }
            if s.freeze_encoder {
                out += "freeze = encoder\n";
            }
            for p in &s.solvers {
                if p.handoff != Handoff::default_for(p.task) {
                    out += &format!("handoff.{} = {}\n", p.task, p.handoff.name());
                }
                if p.shift != SolverSpec::for_task(p.task).shift {
                    out += &format!("shift.{} = {}\n", p.task, p.shift.radius());
                }
            }
            if let Some(c) = &s.checkpoint_out {
                out += &format!("checkpoint_out = {c}\n");
            }
            let o = &s.overrides;
            let mut kv = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    out += &format!("{k} = {v}\n");
                }
            };
            kv("max_iters", o.max_iters.map(|v| v.to_string()));
            kv("batch_size", o.batch_size.map(|v| v.to_string()));
            kv("memory_size", o.memory_size.map(|v| v.to_string()));
            kv("min_len", o.min_len.map(|v| v.to_string()));
            kv("max_len", o.max_len.map(|v| v.to_string()));
            kv("validate_every", o.validate_every.map(|v| v.to_string()));
            kv("val_batch", o.val_batch.map(|v| v.to_string()));
            kv("val_len", o.val_len.map(|v| v.to_string()));
            kv("val_memory", o.val_memory.map(|v| v.to_string()));
            kv("threshold", o.threshold.map(|v| v.to_string()));
            kv("lr", o.lr.map(|v| v.to_string()));
            kv("clip_norm", o.clip_norm.map(|v| v.to_string()));
            kv("ema_half_life", o.ema_half_life.map(|v| v.to_string()));
        }
        out
    }
}

#[derive(Default)]
struct Parser {
    name: Option<String>,
    description: String,
    stages: Vec<StageSpec>,
    raw: Vec<RawStage>,
}

struct RawStage {
    line: usize,
    name: String,
    tasks: Option<Vec<Task>>,
    keys: Vec<(usize, String, String)>,
}

impl Parser {
    fn run(mut self, text: &str) -> Result<ExperimentPipeline, ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |m: String| ExperimentError::Parse { line, message: m };
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(head) = l.strip_prefix('[') {
                let head = head
                    .strip_suffix(']')
                    .ok_or_else(|| err("section header must end with `]`".into()))?;
                let name = head
                    .trim()
                    .strip_prefix("stage")
                    .map(str::trim)
                    .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
                    .ok_or_else(|| err(format!("expected `[stage NAME]`, got `[{head}]`")))?;
                self.raw.push(RawStage {
                    line,
                    name: name.to_string(),
                    tasks: None,
                    keys: Vec::new(),
                });
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{l}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if v.is_empty() {
                return Err(err(format!("`{k}` has an empty value")));
            }
            match self.raw.last_mut() {
                None => match k {
                    "name" => self.name = Some(v.to_string()),
                    "description" => self.description = v.to_string(),
                    _ => {
                        return Err(err(format!(
                            "unknown pipeline key `{k}` (expected name or description)"
                        )))
                    }
                },
                Some(stage) if k == "tasks" => {
                    let tasks = v
                        .split(',')
                        .map(|t| t.trim().parse::<Task>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| err(e.to_string()))?;
                    let distinct: BTreeSet<_> = tasks.iter().map(|t| t.id()).collect();
                    if distinct.len() != tasks.len() {
                        return Err(err("a task is listed twice".into()));
                    }
                    stage.tasks = Some(tasks);
                }
                Some(stage) => stage.keys.push((line, k.to_string(), v.to_string())),
            }
        }
        let name = self.name.clone().ok_or(ExperimentError::Parse {
            line: 1,
            message: "missing `name = ...`".into(),
        })?;
        for raw in std::mem::take(&mut self.raw) {
            let stage = Self::build_stage(raw)?;
            self.stages.push(stage);
        }
        let p = ExperimentPipeline {
            name,
            description: self.description,
            stages: self.stages,
        };
        p.check()?;
        Ok(p)
    }

    fn build_stage(raw: RawStage) -> Result<StageSpec, ExperimentError> {
        let tasks = raw.tasks.ok_or_else(|| ExperimentError::Parse {
            line: raw.line,
            message: format!("stage `{}` has no `tasks` line", raw.name),
        })?;
        let mut solvers: Vec<SolverSpec> = tasks.iter().map(|&t| SolverSpec::for_task(t)).collect();
        let mut stage = StageSpec {
            name: raw.name,
            solvers: Vec::new(),
            encoder: EncoderSource::Fresh,
            freeze_encoder: false,
            overrides: TrainOverrides::default(),
            checkpoint_out: None,
        };
        for (line, k, v) in raw.keys {
            let err = |m: String| ExperimentError::Parse { line, message: m };
            let (base, target) = match k.split_once('.') {
                Some((b, t)) => {
                    let task: Task = t.parse().map_err(|e: crate::tasks::TaskError| err(e.to_string()))?;
                    if !tasks.contains(&task) {
                        return Err(err(format!("`{k}` names a task this stage does not train")));
                    }
                    (b, Some(task))
                }
                None => (k.as_str(), None),
            };
            let targets = solvers.iter_mut().filter(|s| target.is_none_or(|t| s.task == t));
            match base {
                "handoff" => {
                    let h =
                        Handoff::parse(&v).ok_or_else(|| err(format!("handoff must be start or end, got `{v}`")))?;
                    targets.for_each(|s| s.handoff = h);
                }
                "shift" => {
                    let r: u32 = v
                        .parse()
                        .ok()
                        .filter(|&r| r >= 1)
                        .ok_or_else(|| err(format!("shift radius must be a positive integer, got `{v}`")))?;
                    targets.for_each(|s| s.shift = ShiftOffsets::symmetric(r));
                }
                _ if target.is_some() => return Err(err(format!("`{base}` cannot be set per task"))),
                "encoder" => {
                    stage.encoder = if v == "fresh" {
                        EncoderSource::Fresh
                    } else {
                        EncoderSource::Checkpoint(v)
                    }
                }
                "freeze" => {
                    stage.freeze_encoder = match v.as_str() {
                        "encoder" => true,
                        "none" => false,
                        _ => return Err(err(format!("freeze must be encoder or none, got `{v}`"))),
                    }
                }
                "checkpoint_out" => stage.checkpoint_out = Some(v),
                _ => {
                    if !stage.overrides.set(base, &v).map_err(err)? {
                        return Err(err(format!("unknown stage key `{k}`")));
                    }
                }
            }
        }
        stage.solvers = solvers;
        Ok(stage)
    }
}

const ES_END2END: &str = "\
name = es_end2end
description = Encoder and serial-recall solver trained end to end
[stage es]
tasks = serial
checkpoint_out = encoder.ckpt
";

const ES_TRANSFER_SUITE: &str = "\
name = es_transfer_suite
description = Frozen serial-trained encoder (from es_end2end in the same directory) with fresh solvers
[stage serial]
tasks = serial
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = es_serial.ckpt
[stage reverse]
tasks = reverse
encoder = encoder.ckpt
freeze = encoder
handoff = start
checkpoint_out = es_reverse.ckpt
[stage reverse_end]
tasks = reverse
encoder = encoder.ckpt
freeze = encoder
handoff = end
checkpoint_out = es_reverse_end.ckpt
[stage odd]
tasks = odd
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = es_odd.ckpt
[stage comparison]
tasks = comparison
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = es_comparison.ckpt
[stage equality]
tasks = equality
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = es_equality.ckpt
";

const ER_END2END: &str = "\
name = er_end2end
description = Encoder and reverse-recall solver trained end to end
[stage er]
tasks = reverse
checkpoint_out = encoder.ckpt
";

const EJ_JOINT: &str = "\
name = ej_joint
description = One encoder trained jointly with serial and reverse solvers
[stage ej]
tasks = serial, reverse
checkpoint_out = encoder.ckpt
";

const EJ_TRANSFER_SUITE: &str = "\
name = ej_transfer_suite
description = Frozen jointly trained encoder (from ej_joint in the same directory) with fresh solvers for every task
[stage serial]
tasks = serial
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = ej_serial.ckpt
[stage reverse]
tasks = reverse
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = ej_reverse.ckpt
[stage odd]
tasks = odd
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = ej_odd.ckpt
[stage comparison]
tasks = comparison
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = ej_comparison.ckpt
[stage equality]
tasks = equality
encoder = encoder.ckpt
freeze = encoder
checkpoint_out = ej_equality.ckpt
[stage odd_unit_shift]
tasks = odd
encoder = encoder.ckpt
freeze = encoder
shift = 1
max_iters = 30000
checkpoint_out = ej_odd_unit_shift.ckpt
";

/// Source text of every built-in pipeline.
pub const BUILTIN_SOURCES: [&str; 5] = [ES_END2END, ES_TRANSFER_SUITE, ER_END2END, EJ_JOINT, EJ_TRANSFER_SUITE];

pub fn builtin_pipelines() -> Vec<ExperimentPipeline> {
    BUILTIN_SOURCES
        .iter()
        .map(|s| ExperimentPipeline::parse(s).expect("built-in pipelines parse"))
        .collect()
}

pub fn builtin_pipeline(name: &str) -> Result<ExperimentPipeline, ExperimentError> {
    let all = builtin_pipelines();
    let names: Vec<String> = all.iter().map(|p| p.name.clone()).collect();
    all.into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ExperimentError::UnknownPipeline {
            name: name.to_string(),
            available: names.join(", "),
        })
}

/// Per-stage seed: independent of stage order.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    crate::checkpoint::fnv1a(stage.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub write_metrics: bool,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: String,
    pub tasks: Vec<Task>,
    pub config: TrainConfig,
    pub report: TrainReport,
    pub model: MaesAssembly,
    pub checkpoint: Option<PathBuf>,
}

impl StageOutcome {
    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.report.last_validation().map(|v| v.accuracy)
    }
}

/// Rejects stages whose encoder checkpoint neither exists nor comes from an
/// earlier stage. Runs before any training.
pub fn check_dependencies(pipeline: &ExperimentPipeline, out_dir: &Path) -> Result<(), ExperimentError> {
    pipeline.check()?;
    let mut produced = BTreeSet::new();
    for s in &pipeline.stages {
        if let EncoderSource::Checkpoint(p) = &s.encoder {
            let path = out_dir.join(p);
            if !produced.contains(p) && !path.is_file() {
                return Err(ExperimentError::MissingCheckpoint {
                    stage: s.name.clone(),
                    path,
                });
            }
        }
        if let Some(c) = &s.checkpoint_out {
            produced.insert(c.clone());
        }
    }
    Ok(())
}

/// Runs every stage in order, writing checkpoints and metrics into
/// `opts.out_dir`.
pub fn run_pipeline(pipeline: &ExperimentPipeline, opts: &RunOptions) -> Result<Vec<StageOutcome>, ExperimentError> {
    check_dependencies(pipeline, &opts.out_dir)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let mut outcomes = Vec::new();
    for stage in &pipeline.stages {
        outcomes.push(run_stage(pipeline, stage, opts)?);
    }
    Ok(outcomes)
}

pub fn run_stage(
    pipeline: &ExperimentPipeline,
    stage: &StageSpec,
    opts: &RunOptions,
) -> Result<StageOutcome, ExperimentError> {
    let seed = stage_seed(opts.seed, &stage.name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MaesAssembly::new(ModelDims::default(), &stage.solvers, &mut rng)?;
    if let EncoderSource::Checkpoint(p) = &stage.encoder {
        Checkpoint::load(opts.out_dir.join(p))?.restore_group(&mut model, ENCODER_GROUP)?;
    }
    if stage.freeze_encoder {
        freeze(&mut model.store, ENCODER_GROUP).map_err(TrainError::from)?;
    }
    let encoder_before = encoder_values(&model);

    let cfg = stage.train_config(opts.seed);
    let idx: Vec<usize> = (0..model.solvers.len()).collect();
    let report = if opts.write_metrics {
        let path = opts.out_dir.join(format!("{}.metrics.csv", stage.name));
        let mut w = BufWriter::new(File::create(path)?);
        train(&mut model, &idx, &cfg, Some(&mut w))?
    } else {
        train(&mut model, &idx, &cfg, None)?
    };
    if stage.freeze_encoder && encoder_values(&model) != encoder_before {
        return Err(ExperimentError::FrozenDrift {
            stage: stage.name.clone(),
        });
    }

    let checkpoint = match &stage.checkpoint_out {
        Some(c) => {
            let path = opts.out_dir.join(c);
            let prov = Provenance {
                pipeline: pipeline.name.clone(),
                stage: stage.name.clone(),
                seed: opts.seed,
                iterations: report.iterations as u64,
                converged: report.converged,
            };
            Checkpoint::from_assembly(&model, prov).save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(StageOutcome {
        stage: stage.name.clone(),
        tasks: stage.tasks(),
        config: cfg,
        report,
        model,
        checkpoint,
    })
}

fn encoder_values(model: &MaesAssembly) -> Vec<f64> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.group == ENCODER_GROUP)
        .flat_map(|(_, p)| p.value.data().to_vec())
        .collect()
}
