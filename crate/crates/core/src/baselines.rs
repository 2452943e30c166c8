//! Stacked-LSTM sequence-to-sequence baseline.
//!
//! The network sees the main sequence during an encode phase, then emits one
//! prediction per target step during a solve phase, mirroring the encoder and
//! solver phases of MAES. Each input vector is
//! `[main bits (8), aux bits (8), encode flag, solve flag]`.

use crate::autodiff::{AdResult, Eager, Graph, Tape};
use crate::controller::{INIT_SCALE, ITEM_BITS};
use crate::evaluator::{generalization_eval_with, EvalError, EvalReport, GeneralizationSpec};
use crate::params::{ParamId, ParameterStore};
use crate::tasks::{generate_with_len, GenConfig, Task, TaskSample};
use crate::tensor::Tensor;
use crate::trainer::{
    clip_grad_norm, score, Adam, TrainConfig, TrainError, TrainReport, ValidationPoint, METRICS_HEADER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::time::Instant;

pub const LSTM_INPUT: usize = 2 * ITEM_BITS + 2;
pub const LSTM_GROUP: &str = "lstm";

/// One layer's weights: `w` is `4H × (in + H)` with gate blocks in the order
/// input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmLayer<V> {
    pub w: V,
    pub b: V,
}

#[derive(Debug, Clone)]
pub struct LstmState<V> {
    pub h: V,
    pub c: V,
}

/// One LSTM cell update.
pub fn lstm_step<G: Graph>(
    g: &mut G,
    x: &G::V,
    state: &LstmState<G::V>,
    p: &LstmLayer<G::V>,
) -> AdResult<LstmState<G::V>> {
    let hidden = g.value(&state.h).len();
    let xh = g.concat(&[x, &state.h])?;
    let z = g.affine(&p.w, &p.b, &xh)?;
    let zi = g.slice(&z, 0, hidden)?;
    let zf = g.slice(&z, hidden, hidden)?;
    let zg = g.slice(&z, 2 * hidden, hidden)?;
    let zo = g.slice(&z, 3 * hidden, hidden)?;
    let i = g.sigmoid(&zi);
    let f = g.sigmoid(&zf);
    let cand = g.tanh(&zg);
    let o = g.sigmoid(&zo);
    let keep = g.mul(&f, &state.c)?;
    let new = g.mul(&i, &cand)?;
    let c = g.add(&keep, &new)?;
    let tc = g.tanh(&c);
    let h = g.mul(&o, &tc)?;
    Ok(LstmState { h, c })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LstmConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Curriculum: the maximum training length starts here...
    pub curriculum_start: usize,
    /// ...and rises by one after each successful validation up to this.
    pub curriculum_end: usize,
    /// Validation accuracy at the current maximum length needed to advance.
    pub advance_accuracy: f64,
    pub train: TrainConfig,
}

impl LstmConfig {
    /// Two layers of 128 units.
    pub fn desk(task: Task) -> Self {
        Self {
            layers: 2,
            hidden: 128,
            curriculum_start: 5,
            curriculum_end: 20,
            advance_accuracy: 0.99,
            train: TrainConfig::for_task(task),
        }
    }

    /// Three layers of 512 units.
    pub fn full(task: Task) -> Self {
        Self {
            layers: 3,
            hidden: 512,
            ..Self::desk(task)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.layers < 1 || self.hidden < 1 {
            return Err(TrainError::Config("LSTM needs at least one layer and one unit".into()));
        }
        if self.curriculum_start < 1 || self.curriculum_start > self.curriculum_end {
            return Err(TrainError::Config("curriculum must satisfy 1 <= start <= end".into()));
        }
        if self.train.min_len > self.curriculum_start {
            return Err(TrainError::Config("minimum length exceeds the curriculum start".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub task: Task,
    pub layers: Vec<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
    pub store: ParameterStore,
}

impl Lstm {
    pub fn new<R: Rng>(task: Task, layers: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParameterStore::new();
        let mut ids = Vec::new();
        let mut input = LSTM_INPUT;
        for l in 0..layers {
            let w = store
                .insert_uniform(
                    LSTM_GROUP,
                    &format!("lstm.{l}.w"),
                    &[4 * hidden, input + hidden],
                    INIT_SCALE,
                    rng,
                )
                .expect("unique names");
            let mut bias = vec![0.0; 4 * hidden];
            bias[hidden..2 * hidden].fill(1.0);
            let b = store
                .insert(LSTM_GROUP, &format!("lstm.{l}.b"), Tensor::vector(bias))
                .expect("unique names");
            ids.push((w, b));
            input = hidden;
        }
        let out = task.target_width();
        let hw = store
            .insert_uniform(LSTM_GROUP, "lstm.head.w", &[out, hidden], INIT_SCALE, rng)
            .expect("unique names");
        let hb = store
            .insert_zeros(LSTM_GROUP, "lstm.head.b", &[out])
            .expect("unique names");
        Self {
            task,
            layers: ids,
            head: (hw, hb),
            store,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn hidden(&self) -> usize {
        self.store.value(self.layers[0].0).rows() / 4
    }

    /// Per-target-step logits.
    pub fn forward<G: Graph>(&self, g: &mut G, sample: &TaskSample) -> AdResult<Vec<G::V>> {
        let hidden = self.hidden();
        let layers: Vec<LstmLayer<G::V>> = self
            .layers
            .iter()
            .map(|&(w, b)| LstmLayer {
                w: g.param(&self.store, w),
                b: g.param(&self.store, b),
            })
            .collect();
        let hw = g.param(&self.store, self.head.0);
        let hb = g.param(&self.store, self.head.1);
        let mut states: Vec<LstmState<G::V>> = (0..layers.len())
            .map(|_| LstmState {
                h: g.constant(Tensor::zeros(&[hidden])),
                c: g.constant(Tensor::zeros(&[hidden])),
            })
            .collect();
        let run = |g: &mut G, x: Tensor, states: &mut [LstmState<G::V>]| -> AdResult<G::V> {
            let mut inp = g.constant(x);
            for (st, p) in states.iter_mut().zip(&layers) {
                *st = lstm_step(g, &inp, st, p)?;
                inp = st.h.clone();
            }
            Ok(inp)
        };
        for item in sample.main_bits() {
            let mut x = item;
            x.extend(std::iter::repeat_n(0.0, ITEM_BITS));
            x.extend([1.0, 0.0]);
            run(g, Tensor::vector(x), &mut states)?;
        }
        let aux = sample.aux_bits();
        let mut logits = Vec::with_capacity(sample.target_len());
        for t in 0..sample.target_len() {
            let mut x = vec![0.0; ITEM_BITS];
            match &aux {
                Some(a) => x.extend_from_slice(&a[t]),
                None => x.extend(std::iter::repeat_n(0.0, ITEM_BITS)),
            }
            x.extend([0.0, 1.0]);
            let top = run(g, Tensor::vector(x), &mut states)?;
            logits.push(g.affine(&hw, &hb, &top)?);
        }
        Ok(logits)
    }

    pub fn loss<G: Graph>(&self, g: &mut G, sample: &TaskSample) -> AdResult<(G::V, Vec<G::V>)> {
        let logits = self.forward(g, sample)?;
        let refs: Vec<&G::V> = logits.iter().collect();
        let all = g.concat(&refs)?;
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for t in 0..sample.target_len() {
            targets.extend_from_slice(sample.target_tensor(t).data());
            mask.extend_from_slice(sample.mask_tensor(t).data());
        }
        let loss = g.bce_with_logits(&all, &Tensor::vector(targets), &Tensor::vector(mask))?;
        Ok((loss, logits))
    }

    pub fn predict(&self, sample: &TaskSample) -> AdResult<Vec<Tensor>> {
        self.forward(&mut Eager, sample)
    }

    /// Bit accuracy on `batch` samples of length `len`.
    pub fn accuracy<R: Rng>(&self, len: usize, batch: usize, rng: &mut R) -> AdResult<(f64, f64)> {
        let gen = GenConfig::fixed(len);
        let (mut loss, mut c, mut t) = (0.0, 0, 0);
        for _ in 0..batch {
            let s = generate_with_len(self.task, len, &gen, rng);
            let (l, logits) = self.loss(&mut Eager, &s)?;
            loss += l.item();
            let (a, b) = score(&s, &logits);
            c += a;
            t += b;
        }
        Ok((loss / batch as f64, c as f64 / t.max(1) as f64))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LstmReport {
    pub config: LstmConfig,
    pub param_count: usize,
    pub train: TrainReport,
    /// Largest training length reached by the curriculum.
    pub curriculum_reached: usize,
    /// Accuracy at the curriculum's final length after training.
    pub short_accuracy: f64,
    pub generalization: Option<EvalReport>,
}

/// Trains with the curriculum, then optionally evaluates at long lengths.
/// Convergence counts only once the curriculum has reached its end.
pub fn train_lstm_baseline(
    task: Task,
    cfg: &LstmConfig,
    generalization: Option<&GeneralizationSpec>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<(Lstm, LstmReport), TrainError> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x005E_ED0F_7A11_DA7E);
    let mut model = Lstm::new(task, cfg.layers, cfg.hidden, &mut rng);
    let mut adam = Adam::new(tc.adam, &model.store);
    let alpha = 1.0 - 0.5f64.powf(1.0 / tc.ema_half_life);
    let start = Instant::now();
    let mut cur_max = cfg.curriculum_start;
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
    let ad = |e: crate::autodiff::AdError| TrainError::Model(e.into());

    for it in 1..=tc.max_iters {
        model.store.zero_grads();
        let len = rng.gen_range(tc.min_len..=cur_max);
        let gen = GenConfig::fixed(len);
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch_size {
            let s = generate_with_len(task, len, &gen, &mut rng);
            let mut tape = Tape::new();
            let (loss, _) = model.loss(&mut tape, &s).map_err(ad)?;
            batch_loss += tape.value(&loss).item();
            tape.backward(loss).map_err(ad)?.accumulate_into(&mut model.store);
        }
        let loss = batch_loss / tc.batch_size as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: it,
                norms: model.store.group_norms(),
            });
        }
        if tc.batch_size > 1 {
            let s = 1.0 / tc.batch_size as f64;
            let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
            for id in ids {
                model.store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
            }
        }
        clip_grad_norm(&mut model.store, tc.clip_norm);
        adam.step(&mut model.store);
        let e = ema.map_or(loss, |p| p + alpha * (loss - p));
        ema = Some(e);
        report.loss_curve.push(loss);
        report.iterations = it;
        report.final_ema = e;

        let mut val = None;
        if tc.validate_every > 0 && it % tc.validate_every == 0 {
            let (vl, va) = model.accuracy(cur_max, tc.val_batch, &mut val_rng).map_err(ad)?;
            let p = ValidationPoint {
                iteration: it,
                loss: vl,
                accuracy: va,
            };
            if va >= cfg.advance_accuracy && cur_max < cfg.curriculum_end {
                cur_max += 1;
            }
            val = Some(p.clone());
            report.validation.push(p);
        }
        if let Some(w) = metrics.as_deref_mut() {
            let (vl, va) = val
                .map(|p| (p.loss.to_string(), p.accuracy.to_string()))
                .unwrap_or_default();
            writeln!(w, "{it},{loss},{e},{vl},{va},{}", start.elapsed().as_millis())?;
        }
        if cur_max == cfg.curriculum_end && e <= tc.threshold {
            report.converged = true;
            break;
        }
    }
    report.wall_ms = start.elapsed().as_millis();
    let (_, short_accuracy) = model.accuracy(cur_max, tc.val_batch, &mut val_rng).map_err(ad)?;
    let generalization = match generalization {
        Some(spec) => Some(
            generalization_eval_with(spec, |s| model.predict(s).map_err(|e| EvalError::Model(e.into())))
                .map_err(|e| TrainError::Config(e.to_string()))?,
        ),
        None => None,
    };
    let rep = LstmReport {
        config: cfg.clone(),
        param_count: model.param_count(),
        train: report,
        curriculum_reached: cur_max,
        short_accuracy,
        generalization,
    };
    Ok((model, rep))
}
