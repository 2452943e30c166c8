//! Length generalization, attention and memory exports, forward-bias probe.

use crate::model::{MaesAssembly, ModelError};
use crate::tasks::{generate_with_len, GenConfig, Task, TaskSample};
use crate::tensor::Tensor;
use crate::trainer::score;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("memory size {memory} must exceed sequence length {length}")]
    MemoryTooSmall { memory: usize, length: usize },
    #[error("invalid evaluation spec: {0}")]
    Spec(String),
    #[error("no solver for task {0} in this model")]
    NoSolver(Task),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationSpec {
    pub task: Task,
    pub length: usize,
    pub memory: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub seed: u64,
    /// Threads used to evaluate batches; results do not depend on it.
    pub workers: usize,
}

impl GeneralizationSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            length: 1000,
            memory: 1024,
            batch_size: 32,
            batches: 100,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.memory <= self.length {
            return Err(EvalError::MemoryTooSmall {
                memory: self.memory,
                length: self.length,
            });
        }
        if self.length == 0 || self.batch_size == 0 || self.batches == 0 || self.workers == 0 {
            return Err(EvalError::Spec(
                "length, batch size, batch count and workers must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub spec: GeneralizationSpec,
    pub mean_accuracy: f64,
    pub batch_accuracies: Vec<f64>,
    /// Standard error of the mean over batches.
    pub stderr: f64,
    /// Fraction of sequences with every masked bit right.
    pub exact_match: f64,
    pub wall_ms: u128,
}

impl EvalReport {
    /// Half-width of the normal 95% interval.
    pub fn ci95(&self) -> f64 {
        1.96 * self.stderr
    }

    /// Bit accuracy ≥ 0.999 and exact match ≥ 0.99.
    pub fn is_perfect(&self) -> bool {
        self.mean_accuracy >= 0.999 && self.exact_match >= 0.99
    }
}

pub const REPORT_HEADER: &str = "task,length,memory,batch_size,batches,seed,mean,stderr,exact_match,wall_ms";

/// Writes the header plus one row per report.
pub fn write_report_csv<W: Write>(w: &mut W, reports: &[EvalReport]) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        let s = &r.spec;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            s.task,
            s.length,
            s.memory,
            s.batch_size,
            s.batches,
            s.seed,
            r.mean_accuracy,
            r.stderr,
            r.exact_match,
            r.wall_ms
        )?;
    }
    Ok(())
}

/// Index of the first solver trained for `task`.
pub fn solver_for(model: &MaesAssembly, task: Task) -> Result<usize, EvalError> {
    model
        .solvers
        .iter()
        .position(|s| s.spec.task == task)
        .ok_or(EvalError::NoSolver(task))
}

struct BatchResult {
    correct: usize,
    total: usize,
    exact: usize,
}

fn eval_batch<F>(predict: &F, spec: &GeneralizationSpec, b: usize) -> Result<BatchResult, EvalError>
where
    F: Fn(&TaskSample) -> Result<Vec<Tensor>, EvalError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(b as u64);
    let gen = GenConfig::fixed(spec.length);
    let mut out = BatchResult {
        correct: 0,
        total: 0,
        exact: 0,
    };
    for _ in 0..spec.batch_size {
        let s = generate_with_len(spec.task, spec.length, &gen, &mut rng);
        let (c, t) = score(&s, &predict(&s)?);
        out.correct += c;
        out.total += t;
        out.exact += (c == t) as usize;
    }
    Ok(out)
}

/// Mean masked-bit accuracy of a MAES solver over `batches × batch_size`
/// fresh samples. The model is only read.
pub fn generalization_eval(model: &MaesAssembly, spec: &GeneralizationSpec) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    let idx = solver_for(model, spec.task)?;
    generalization_eval_with(spec, |s| Ok(model.infer(idx, s, spec.memory, false)?.1.logits))
}

/// Same protocol for any model mapping a sample to per-step logits. Batch
/// `b` draws from its own stream, so results are identical for any worker
/// count.
pub fn generalization_eval_with<F>(spec: &GeneralizationSpec, predict: F) -> Result<EvalReport, EvalError>
where
    F: Fn(&TaskSample) -> Result<Vec<Tensor>, EvalError> + Sync,
{
    spec.validate()?;
    let start = Instant::now();
    let mut results: Vec<Option<Result<BatchResult, EvalError>>> = (0..spec.batches).map(|_| None).collect();
    let per = spec.batches.div_ceil(spec.workers);
    std::thread::scope(|scope| {
        for (c, chunk) in results.chunks_mut(per).enumerate() {
            let predict = &predict;
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(eval_batch(predict, spec, c * per + k));
                }
            });
        }
    });
    let mut batch_accuracies = Vec::with_capacity(spec.batches);
    let mut exact = 0;
    for r in results {
        let r = r.expect("every batch evaluated")?;
        batch_accuracies.push(r.correct as f64 / r.total.max(1) as f64);
        exact += r.exact;
    }
    let k = batch_accuracies.len() as f64;
    let mean = batch_accuracies.iter().sum::<f64>() / k;
    let var = if k > 1.0 {
        batch_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(EvalReport {
        spec: spec.clone(),
        mean_accuracy: mean,
        batch_accuracies,
        stderr: (var / k).sqrt(),
        exact_match: exact as f64 / (spec.batches * spec.batch_size) as f64,
        wall_ms: start.elapsed().as_millis(),
    })
}

/// A rows × cols grid of raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Map {
    /// Attention history as addresses × time steps.
    pub fn from_attention(history: &[Tensor]) -> Self {
        let rows = history.first().map_or(0, |w| w.len());
        let cols = history.len();
        let mut data = vec![0.0; rows * cols];
        for (t, w) in history.iter().enumerate() {
            for (i, v) in w.data().iter().enumerate() {
                data[i * cols + t] = *v;
            }
        }
        Self { rows, cols, data }
    }

    /// Memory as addresses × word components.
    pub fn from_memory(memory: &Tensor) -> Self {
        Self {
            rows: memory.rows(),
            cols: memory.cols(),
            data: memory.data().to_vec(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Min-max scaled to 0..=255; a constant map becomes all zeros.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.data
            .iter()
            .map(|v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    /// Binary PGM (P5): width = columns, height = rows.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.to_gray());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            s += &row.join(",");
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.pgm` and `<stem>.csv`; returns both paths.
    pub fn export(&self, stem: impl AsRef<Path>) -> io::Result<(PathBuf, PathBuf)> {
        let stem = stem.as_ref();
        let pgm = stem.with_extension("pgm");
        let csv = stem.with_extension("csv");
        std::fs::write(&pgm, self.to_pgm())?;
        std::fs::write(&csv, self.to_csv())?;
        Ok((pgm, csv))
    }
}

pub fn export_attention_map(history: &[Tensor], stem: impl AsRef<Path>) -> io::Result<(PathBuf, PathBuf)> {
    Map::from_attention(history).export(stem)
}

pub fn export_memory_map(memory: &Tensor, stem: impl AsRef<Path>) -> io::Result<(PathBuf, PathBuf)> {
    Map::from_memory(memory).export(stem)
}

/// Column argmax and max of an attention history.
pub fn attention_peaks(history: &[Tensor]) -> Vec<(usize, f64)> {
    history.iter().map(|w| (w.argmax(), w.max())).collect()
}

/// True when every step's attention is sharper than `min_peak` and the
/// argmax moves by exactly one address (either direction, mod N) per step.
pub fn is_sequential_write(history: &[Tensor], min_peak: f64) -> bool {
    let peaks = attention_peaks(history);
    let Some(n) = history.first().map(|w| w.len()) else {
        return true;
    };
    peaks.iter().all(|&(_, m)| m > min_peak)
        && peaks.windows(2).all(|p| {
            let d = (p[1].0 + n - p[0].0) % n;
            d == 1 || d == n - 1
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardBias {
    pub items: Vec<u8>,
    pub length: usize,
    pub memory: usize,
    /// Mean over probe items of the repeated-element dispersion.
    pub dispersion_a: f64,
    pub dispersion_b: f64,
    /// `dispersion_a / dispersion_b`, defined as 1 when both are zero.
    pub ratio: f64,
}

/// Runs the repeated-element probe on two encoders with the same items.
pub fn forward_bias_report(
    a: &MaesAssembly,
    b: &MaesAssembly,
    items: &[u8],
    length: usize,
    memory: usize,
) -> Result<ForwardBias, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Spec("probe needs at least one item".into()));
    }
    let mean = |m: &MaesAssembly| -> Result<f64, EvalError> {
        let mut s = 0.0;
        for &it in items {
            s += m.repeated_element_probe(it, length, memory)?;
        }
        Ok(s / items.len() as f64)
    };
    let (da, db) = (mean(a)?, mean(b)?);
    let ratio = if da == db { 1.0 } else { da / db };
    Ok(ForwardBias {
        items: items.to_vec(),
        length,
        memory,
        dispersion_a: da,
        dispersion_b: db,
        ratio,
    })
}
