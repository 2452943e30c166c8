//! Training loop: batch sampling, mean BCE, clipped Adam updates on unfrozen
//! groups, EMA-based convergence and periodic validation on longer sequences.

use crate::autodiff::{Graph, Tape};
use crate::model::{MaesAssembly, ModelError, ENCODER_GROUP};
use crate::params::{ParamError, ParameterStore};
use crate::tasks::{generate_with_len, oracle, GenConfig, Task, TaskSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{self, Write};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("non-finite loss at iteration {iteration}; parameter norms {norms:?}")]
    NonFinite {
        iteration: usize,
        norms: BTreeMap<String, f64>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub memory_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub validate_every: usize,
    pub val_batch: usize,
    pub val_len: usize,
    pub val_memory: usize,
    pub threshold: f64,
    pub max_iters: usize,
    pub ema_half_life: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            memory_size: 30,
            min_len: 3,
            max_len: 20,
            validate_every: 100,
            val_batch: 64,
            val_len: 64,
            val_memory: 80,
            threshold: 1e-5,
            max_iters: 100_000,
            ema_half_life: 100.0,
            clip_norm: 10.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for `task`: the comparison tasks use batches of 64 and a
    /// step size of 3e-3, the others batch 1 and 1e-3.
    pub fn for_task(task: Task) -> Self {
        if task.has_aux() {
            Self {
                batch_size: 64,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                ..Self::default()
            }
        } else {
            Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.threshold <= 0.0 {
            return bad("threshold must be positive");
        }
        if self.max_iters < 1 || self.batch_size < 1 {
            return bad("iteration cap and batch size must be at least 1");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad("length range must satisfy 1 <= min <= max");
        }
        if self.memory_size < self.max_len || self.val_memory < self.val_len {
            return bad("memory must hold the longest sequence");
        }
        if self.ema_half_life <= 0.0 || self.clip_norm <= 0.0 {
            return bad("half-life and clip norm must be positive");
        }
        Ok(())
    }

    fn gen(&self) -> GenConfig {
        GenConfig {
            min_len: self.min_len,
            max_len: self.max_len,
            ..GenConfig::default()
        }
    }

    fn ema_alpha(&self) -> f64 {
        1.0 - 0.5f64.powf(1.0 / self.ema_half_life)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub converged: bool,
    /// Iterations run; when converged, the iteration at which the EMA first
    /// reached the threshold.
    pub iterations: usize,
    pub final_ema: f64,
    pub loss_curve: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub wall_ms: u128,
}

impl TrainReport {
    pub fn last_validation(&self) -> Option<&ValidationPoint> {
        self.validation.last()
    }
}

/// Freezes a parameter group; unknown groups are rejected.
pub fn freeze(store: &mut ParameterStore, group: &str) -> Result<(), ParamError> {
    store.freeze(group)
}

/// Adam with per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParameterStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Updates every unfrozen parameter from its gradient.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let k = id.0;
            let grad = store.grad(id).data().to_vec();
            let value = store.value_mut(id).data_mut();
            for (i, g) in grad.into_iter().enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                value[i] -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store
        .iter()
        .map(|(id, _)| id)
        .filter(|&id| !store.is_frozen(id))
        .collect();
    let norm = ids
        .iter()
        .flat_map(|&id| store.grad(id).data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Builds the sample each solver task expects from one shared main sequence.
fn joint_samples<R: Rng>(tasks: &[Task], len: usize, gen: &GenConfig, rng: &mut R) -> Vec<TaskSample> {
    let first = generate_with_len(tasks[0], len, gen, rng);
    tasks
        .iter()
        .map(|&t| {
            if t == tasks[0] {
                first.clone()
            } else {
                let (target, mask) = oracle(t, &first.main, None);
                TaskSample {
                    task: t,
                    main: first.main.clone(),
                    aux: None,
                    target,
                    mask,
                }
            }
        })
        .collect()
}

/// Mean loss and masked-bit accuracy of solver `idx` on a fresh batch.
pub fn validate<R: Rng>(
    model: &MaesAssembly,
    idx: usize,
    batch: usize,
    len: usize,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64), ModelError> {
    let task = model.solvers[idx].spec.task;
    let gen = GenConfig::fixed(len);
    let mut loss = 0.0;
    let (mut correct, mut total) = (0usize, 0usize);
    for _ in 0..batch {
        let s = generate_with_len(task, len, &gen, rng);
        let (l, rollout) = model.infer(idx, &s, n, false)?;
        loss += l;
        let (c, t) = score(&s, &rollout.logits);
        correct += c;
        total += t;
    }
    Ok((loss / batch as f64, correct as f64 / total as f64))
}

/// Counts masked target bits whose rounded prediction is right.
pub fn score(sample: &TaskSample, logits: &[crate::tensor::Tensor]) -> (usize, usize) {
    let (mut correct, mut total) = (0, 0);
    for (t, z) in logits.iter().enumerate() {
        if sample.mask[t] == 0 {
            continue;
        }
        let target = sample.target_tensor(t);
        for (zv, tv) in z.data().iter().zip(target.data()) {
            total += 1;
            if (*zv >= 0.0) == (*tv == 1.0) {
                correct += 1;
            }
        }
    }
    (correct, total)
}

pub const METRICS_HEADER: &str = "iteration,raw_loss,ema_loss,val_loss,val_accuracy,wall_ms";

/// Trains the listed solvers (jointly when more than one) together with
/// whatever encoder groups are not frozen.
pub fn train(
    model: &mut MaesAssembly,
    solvers: &[usize],
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if solvers.is_empty() {
        return Err(TrainError::Config("no solvers to train".into()));
    }
    let tasks: Vec<Task> = solvers.iter().map(|&i| model.solvers[i].spec.task).collect();
    if tasks.len() > 1 && tasks.iter().any(|t| t.has_aux()) {
        return Err(TrainError::Config("joint training supports recall tasks only".into()));
    }

    let start = Instant::now();
    let gen = cfg.gen();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_7A11_DA7E);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let alpha = cfg.ema_alpha();
    let encoder_frozen = model.store.group_frozen(ENCODER_GROUP) == Some(true);
    let mut ema: Option<f64> = None;
    let mut report = TrainReport {
        converged: false,
        iterations: 0,
        final_ema: f64::NAN,
        loss_curve: Vec::new(),
        validation: Vec::new(),
        wall_ms: 0,
    };
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }

    for it in 1..=cfg.max_iters {
        model.store.zero_grads();
        let len = gen.sample_len(&mut rng);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let samples = joint_samples(&tasks, len, &gen, &mut rng);
            let mut tape = Tape::new();
            let loss = if solvers.len() == 1 && encoder_frozen {
                model.detached_encoder_loss(&mut tape, solvers[0], &samples[0], cfg.memory_size)?
            } else if solvers.len() == 1 {
                model
                    .full_forward(&mut tape, solvers[0], &samples[0], cfg.memory_size, false)?
                    .0
            } else {
                let pairs: Vec<(usize, &TaskSample)> = solvers.iter().copied().zip(samples.iter()).collect();
                model.joint_loss(&mut tape, &pairs, cfg.memory_size)?
            };
            batch_loss += tape.value(&loss).item();
            tape.backward(loss)
                .expect("loss is scalar")
                .accumulate_into(&mut model.store);
        }
        let loss = batch_loss / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: it,
                norms: model.store.group_norms(),
            });
        }
        if cfg.batch_size > 1 {
            let s = 1.0 / cfg.batch_size as f64;
            let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
            for id in ids {
                model.store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
            }
        }
        clip_grad_norm(&mut model.store, cfg.clip_norm);
        adam.step(&mut model.store);

        let e = match ema {
            None => loss,
            Some(prev) => prev + alpha * (loss - prev),
        };
        ema = Some(e);
        report.loss_curve.push(loss);
        report.iterations = it;
        report.final_ema = e;

        let mut val = None;
        if cfg.validate_every > 0 && it % cfg.validate_every == 0 {
            let mut vl = 0.0;
            let mut va = 0.0;
            for &idx in solvers {
                let (l, a) = validate(model, idx, cfg.val_batch, cfg.val_len, cfg.val_memory, &mut val_rng)?;
                vl += l;
                va += a;
            }
            let k = solvers.len() as f64;
            let p = ValidationPoint {
                iteration: it,
                loss: vl / k,
                accuracy: va / k,
            };
            val = Some(p.clone());
            report.validation.push(p);
        }
        if let Some(w) = metrics.as_deref_mut() {
            let (vl, va) = val
                .map(|p| (p.loss.to_string(), p.accuracy.to_string()))
                .unwrap_or_default();
            writeln!(w, "{it},{loss},{e},{vl},{va},{}", start.elapsed().as_millis())?;
        }
        if e <= cfg.threshold {
            report.converged = true;
            break;
        }
    }
    report.wall_ms = start.elapsed().as_millis();
    Ok(report)
}
