//! Encoder-solver assembly sharing one external memory.
//!
//! Each step of either controller:
//!
//! 1. reads memory with the previous attention,
//! 2. updates the hidden state and computes interface parameters from
//!    `[x, h_prev, r]`,
//! 3. shifts and sharpens the previous attention into the new one,
//! 4. writes memory with the new attention.
//!
//! After the encoder has consumed the main input, its memory (and, for
//! [`Handoff::AttentionAtEnd`], its final attention) initialize the solver.

use crate::autodiff::{AdError, Eager, Graph, Tape, Var};
use crate::controller::{concat_inputs, Bound, Controller, ControllerConfig, ControllerError, OutputSpec, ITEM_BITS};
use crate::memory::{self, MemoryState, ShiftOffsets};
use crate::params::{ParamError, ParameterStore};
use crate::tasks::{Task, TaskSample};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

/// Trainable-scalar ceiling for any assembly.
pub const PARAM_BUDGET: usize = 2000;

pub const ENCODER_GROUP: &str = "encoder";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("input item {index} is not a binary {ITEM_BITS}-bit vector")]
    NonBinaryInput { index: usize },
    #[error("unknown solver `{0}`")]
    UnknownSolver(String),
    #[error("solver needs at least one step")]
    NoSteps,
    #[error("auxiliary input has {got} items, solver runs {steps} steps")]
    AuxLength { got: usize, steps: usize },
    #[error("solver `{solver}` expects {expected} input bits per step, got {got}")]
    InputWidth {
        solver: String,
        expected: usize,
        got: usize,
    },
    #[error("assembly has {0} trainable scalars, budget is {PARAM_BUDGET}")]
    OverBudget(usize),
    #[error("memory of {n} addresses cannot hold {len} items")]
    MemoryTooSmall { n: usize, len: usize },
    #[error("duplicate solver `{0}`")]
    DuplicateSolver(String),
    #[error("sample of task {task} given to solver for {solver}")]
    TaskMismatch { task: Task, solver: Task },
}

/// Where the solver's read attention starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Handoff {
    /// The encoder's initial attention `w₀`.
    AttentionAtStart,
    /// The encoder's final write attention.
    AttentionAtEnd,
}

impl Handoff {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Reverse => Handoff::AttentionAtEnd,
            _ => Handoff::AttentionAtStart,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Handoff::AttentionAtStart => "start",
            Handoff::AttentionAtEnd => "end",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "start" => Some(Handoff::AttentionAtStart),
            "end" => Some(Handoff::AttentionAtEnd),
            _ => None,
        }
    }
}

/// Declarative description of one solver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolverSpec {
    pub id: String,
    pub task: Task,
    pub handoff: Handoff,
    pub shift: ShiftOffsets,
    /// Ablation: solver never writes memory.
    pub read_only: bool,
}

impl SolverSpec {
    /// Default solver for `task`, named after it.
    pub fn for_task(task: Task) -> Self {
        let shift = match task {
            Task::Odd => ShiftOffsets::symmetric(2),
            _ => ShiftOffsets::unit(),
        };
        Self {
            id: task.name().to_string(),
            task,
            handoff: Handoff::default_for(task),
            shift,
            read_only: false,
        }
    }

    pub fn with_handoff(mut self, handoff: Handoff) -> Self {
        self.handoff = handoff;
        self
    }

    pub fn with_shift(mut self, shift: ShiftOffsets) -> Self {
        self.shift = shift;
        self
    }

    pub fn group(&self) -> String {
        format!("solver.{}", self.id)
    }

    /// Controller layout: recall solvers take no external input and use a
    /// linear head; comparison solvers see the auxiliary item and use an MLP.
    pub fn controller_config(&self, dims: &ModelDims) -> ControllerConfig {
        let (input_size, output) = if self.task.has_aux() {
            (
                ITEM_BITS,
                OutputSpec::Mlp {
                    hidden: dims.mlp_hidden,
                    out: 1,
                },
            )
        } else {
            (0, OutputSpec::Linear { out: ITEM_BITS })
        };
        ControllerConfig {
            input_size,
            hidden_size: dims.hidden_size,
            read_size: dims.word_size,
            shift: self.shift.clone(),
            output,
        }
    }
}

/// Sizes shared by every controller of an assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub word_size: usize,
    pub hidden_size: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            word_size: 10,
            hidden_size: 5,
            mlp_hidden: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solver {
    pub spec: SolverSpec,
    pub controller: Controller,
}

/// Encoder plus solvers, with the parameters they own.
#[derive(Debug, Clone)]
pub struct MaesAssembly {
    pub dims: ModelDims,
    pub encoder: Controller,
    pub solvers: Vec<Solver>,
    pub store: ParameterStore,
}

/// Per-step records of one rollout.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    /// Encoder write attention after each input item.
    pub write_attention: Vec<Tensor>,
    /// Attention each solver step read with.
    pub read_attention: Vec<Tensor>,
    pub logits: Vec<Tensor>,
    /// Memory at handoff.
    pub encoded_memory: Option<Tensor>,
}

/// Result of running the encoder.
#[derive(Debug, Clone)]
pub struct Encoded<V> {
    pub state: MemoryState<V>,
    pub initial_attention: V,
    pub history: Vec<Tensor>,
}

/// Result of running one solver.
#[derive(Debug, Clone)]
pub struct Solved<V> {
    pub logits: Vec<V>,
    pub read_history: Vec<Tensor>,
    pub state: MemoryState<V>,
}

/// An assembly's parameters bound onto one graph.
pub struct BoundAssembly<V> {
    encoder: Bound<V>,
    solvers: Vec<Option<Bound<V>>>,
}

fn check_binary(items: &[Vec<f64>], offset: usize) -> Result<(), ModelError> {
    for (i, it) in items.iter().enumerate() {
        if it.len() != ITEM_BITS || it.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ModelError::NonBinaryInput { index: offset + i });
        }
    }
    Ok(())
}

type StepOut<V> = (V, V, MemoryState<V>);

/// One read → control → attention → write step shared by encoder and solver.
/// Returns the new hidden state, the read vector and the updated memory state.
fn step<G: Graph>(
    g: &mut G,
    ctrl: &Controller,
    bound: &Bound<G::V>,
    x: Option<&G::V>,
    h_prev: &G::V,
    state: MemoryState<G::V>,
    write: bool,
) -> Result<StepOut<G::V>, ModelError> {
    let r = memory::read(g, &state.memory, &state.attention)?;
    let xhr = concat_inputs(g, x, h_prev, &r)?;
    let h = ctrl.rnn_step(g, bound, &xhr)?;
    let p = ctrl.interface_head(g, bound, &xhr)?;
    let w = memory::update_attention(g, &state.attention, &p.shift, &p.gamma, &ctrl.config.shift)?;
    let mem = if write {
        memory::write(g, state.memory, &w, &p.erase, &p.add)?
    } else {
        state.memory
    };
    Ok((
        h,
        r,
        MemoryState {
            memory: mem,
            attention: w,
        },
    ))
}

impl MaesAssembly {
    /// Builds a freshly initialized assembly. Parameter shapes never depend
    /// on the memory size.
    pub fn new<R: Rng>(dims: ModelDims, solvers: &[SolverSpec], rng: &mut R) -> Result<Self, ModelError> {
        let mut store = ParameterStore::new();
        let enc_cfg = ControllerConfig {
            read_size: dims.word_size,
            hidden_size: dims.hidden_size,
            ..ControllerConfig::encoder()
        };
        let encoder = Controller::build(&mut store, ENCODER_GROUP, enc_cfg, rng)?;
        let mut built = Vec::new();
        for spec in solvers {
            if built.iter().any(|s: &Solver| s.spec.id == spec.id) {
                return Err(ModelError::DuplicateSolver(spec.id.clone()));
            }
            let controller = Controller::build(&mut store, &spec.group(), spec.controller_config(&dims), rng)?;
            built.push(Solver {
                spec: spec.clone(),
                controller,
            });
        }
        let count = store.scalar_count();
        if count >= PARAM_BUDGET {
            return Err(ModelError::OverBudget(count));
        }
        Ok(Self {
            dims,
            encoder,
            solvers: built,
            store,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn solver_index(&self, id: &str) -> Result<usize, ModelError> {
        self.solvers
            .iter()
            .position(|s| s.spec.id == id)
            .ok_or_else(|| ModelError::UnknownSolver(id.to_string()))
    }

    pub fn solver(&self, id: &str) -> Result<&Solver, ModelError> {
        Ok(&self.solvers[self.solver_index(id)?])
    }

    /// Binds the encoder and the listed solvers.
    pub fn bind<G: Graph>(&self, g: &mut G, solvers: &[usize]) -> BoundAssembly<G::V> {
        let encoder = self.encoder.bind(g, &self.store);
        let mut bound: Vec<Option<Bound<G::V>>> = (0..self.solvers.len()).map(|_| None).collect();
        for &i in solvers {
            bound[i] = Some(self.solvers[i].controller.bind(g, &self.store));
        }
        BoundAssembly {
            encoder,
            solvers: bound,
        }
    }

    /// Runs the encoder over `main` with `n` memory addresses.
    pub fn encode<G: Graph>(
        &self,
        g: &mut G,
        bound: &BoundAssembly<G::V>,
        main: &[Vec<f64>],
        n: usize,
        record: bool,
    ) -> Result<Encoded<G::V>, ModelError> {
        check_binary(main, 0)?;
        let w0 = g.constant(memory::initial_attention(n));
        let mut state = MemoryState {
            memory: g.constant(memory::initial_memory(n, self.dims.word_size)),
            attention: w0.clone(),
        };
        let mut h = self.encoder.initial_hidden(g, &bound.encoder);
        let mut history = Vec::new();
        for item in main {
            let x = g.constant(Tensor::vector(item.clone()));
            let (h_new, _, s) = step(g, &self.encoder, &bound.encoder, Some(&x), &h, state, true)?;
            h = h_new;
            state = s;
            if record {
                history.push(g.value(&state.attention).clone());
            }
        }
        Ok(Encoded {
            state,
            initial_attention: w0,
            history,
        })
    }

    /// Runs solver `idx` for `n_steps` from the handed-off memory.
    #[allow(clippy::too_many_arguments)]
    pub fn solve<G: Graph>(
        &self,
        g: &mut G,
        bound: &BoundAssembly<G::V>,
        idx: usize,
        encoded: &Encoded<G::V>,
        aux: Option<&[Vec<f64>]>,
        n_steps: usize,
        record: bool,
    ) -> Result<Solved<G::V>, ModelError> {
        let solver = self
            .solvers
            .get(idx)
            .ok_or_else(|| ModelError::UnknownSolver(format!("#{idx}")))?;
        let sb = bound.solvers[idx]
            .as_ref()
            .ok_or_else(|| ModelError::UnknownSolver(format!("{} (not bound)", solver.spec.id)))?;
        if n_steps == 0 {
            return Err(ModelError::NoSteps);
        }
        let ctrl = &solver.controller;
        let width = ctrl.config.input_size;
        match aux {
            Some(a) => {
                if a.len() != n_steps {
                    return Err(ModelError::AuxLength {
                        got: a.len(),
                        steps: n_steps,
                    });
                }
                if width != ITEM_BITS {
                    return Err(ModelError::InputWidth {
                        solver: solver.spec.id.clone(),
                        expected: width,
                        got: ITEM_BITS,
                    });
                }
                check_binary(a, 0)?;
            }
            None if width != 0 => {
                return Err(ModelError::InputWidth {
                    solver: solver.spec.id.clone(),
                    expected: width,
                    got: 0,
                })
            }
            None => {}
        }
        let attention = match solver.spec.handoff {
            Handoff::AttentionAtStart => encoded.initial_attention.clone(),
            Handoff::AttentionAtEnd => encoded.state.attention.clone(),
        };
        let mut state = MemoryState {
            memory: encoded.state.memory.clone(),
            attention,
        };
        let mut h = ctrl.initial_hidden(g, sb);
        let mut logits = Vec::with_capacity(n_steps);
        let mut read_history = Vec::new();
        for t in 0..n_steps {
            let x = aux.map(|a| g.constant(Tensor::vector(a[t].clone())));
            if record {
                read_history.push(g.value(&state.attention).clone());
            }
            let (h_new, r, s) = step(g, ctrl, sb, x.as_ref(), &h, state, !solver.spec.read_only)?;
            let xhr = concat_inputs(g, x.as_ref(), &h_new, &r)?;
            logits.push(ctrl.output_head(g, sb, &xhr)?);
            h = h_new;
            state = s;
        }
        Ok(Solved {
            logits,
            read_history,
            state,
        })
    }

    fn check_task(&self, idx: usize, sample: &TaskSample) -> Result<(), ModelError> {
        let solver = self.solvers[idx].spec.task;
        if solver != sample.task {
            return Err(ModelError::TaskMismatch {
                task: sample.task,
                solver,
            });
        }
        Ok(())
    }

    /// Mean BCE of one solver on a sample, from an existing encoding.
    fn solver_loss<G: Graph>(
        &self,
        g: &mut G,
        bound: &BoundAssembly<G::V>,
        idx: usize,
        encoded: &Encoded<G::V>,
        sample: &TaskSample,
        record: bool,
    ) -> Result<(G::V, Solved<G::V>), ModelError> {
        self.check_task(idx, sample)?;
        let aux = sample.aux_bits();
        let solved = self.solve(g, bound, idx, encoded, aux.as_deref(), sample.target_len(), record)?;
        let refs: Vec<&G::V> = solved.logits.iter().collect();
        let all = g.concat(&refs)?;
        let width = sample.task.target_width();
        let mut targets = Vec::with_capacity(sample.target_len() * width);
        let mut mask = Vec::with_capacity(targets.capacity());
        for t in 0..sample.target_len() {
            targets.extend_from_slice(sample.target_tensor(t).data());
            mask.extend_from_slice(sample.mask_tensor(t).data());
        }
        let loss = g.bce_with_logits(&all, &Tensor::vector(targets), &Tensor::vector(mask))?;
        Ok((loss, solved))
    }

    /// Encode then solve with solver `idx`; returns loss, logits and a rollout.
    pub fn full_forward<G: Graph>(
        &self,
        g: &mut G,
        idx: usize,
        sample: &TaskSample,
        n: usize,
        record: bool,
    ) -> Result<(G::V, Rollout), ModelError> {
        if n < sample.len() {
            return Err(ModelError::MemoryTooSmall { n, len: sample.len() });
        }
        let bound = self.bind(g, &[idx]);
        let encoded = self.encode(g, &bound, &sample.main_bits(), n, record)?;
        let encoded_memory = record.then(|| g.value(&encoded.state.memory).clone());
        let (loss, solved) = self.solver_loss(g, &bound, idx, &encoded, sample, record)?;
        let rollout = Rollout {
            write_attention: encoded.history,
            read_attention: solved.read_history,
            logits: solved.logits.iter().map(|v| g.value(v).clone()).collect(),
            encoded_memory,
        };
        Ok((loss, rollout))
    }

    /// Tape loss for solver `idx` with the encoder run value-only. The
    /// encoder receives no gradient, so use this only while it is frozen.
    pub fn detached_encoder_loss(
        &self,
        tape: &mut Tape,
        idx: usize,
        sample: &TaskSample,
        n: usize,
    ) -> Result<Var, ModelError> {
        if n < sample.len() {
            return Err(ModelError::MemoryTooSmall { n, len: sample.len() });
        }
        let mut e = Eager;
        let eb = self.bind(&mut e, &[]);
        let enc = self.encode(&mut e, &eb, &sample.main_bits(), n, false)?;
        let encoded = Encoded {
            state: MemoryState {
                memory: tape.constant(enc.state.memory),
                attention: tape.constant(enc.state.attention),
            },
            initial_attention: tape.constant(enc.initial_attention),
            history: Vec::new(),
        };
        let bound = self.bind(tape, &[idx]);
        Ok(self.solver_loss(tape, &bound, idx, &encoded, sample, false)?.0)
    }

    /// Joint loss on one encoding: the unweighted mean of each listed
    /// solver's loss on its own sample (samples share the main sequence).
    pub fn joint_loss(&self, tape: &mut Tape, solvers: &[(usize, &TaskSample)], n: usize) -> Result<Var, ModelError> {
        let first = solvers.first().ok_or(ModelError::NoSteps)?.1;
        if solvers.iter().any(|(_, s)| s.main != first.main) {
            return Err(ModelError::Ad(AdError::Domain {
                op: "joint_loss",
                reason: "joint samples must share the main sequence".into(),
            }));
        }
        if n < first.len() {
            return Err(ModelError::MemoryTooSmall { n, len: first.len() });
        }
        let ids: Vec<usize> = solvers.iter().map(|(i, _)| *i).collect();
        let bound = self.bind(tape, &ids);
        let encoded = self.encode(tape, &bound, &first.main_bits(), n, false)?;
        let mut losses = Vec::new();
        for (idx, sample) in solvers {
            let (l, _) = self.solver_loss(tape, &bound, *idx, &encoded, sample, false)?;
            losses.push(l);
        }
        let refs: Vec<&Var> = losses.iter().collect();
        let stacked = tape.concat(&refs)?;
        let total = tape.sum(&stacked);
        Ok(tape.scale(&total, 1.0 / losses.len() as f64))
    }

    /// Value-only forward pass.
    pub fn infer(&self, idx: usize, sample: &TaskSample, n: usize, record: bool) -> Result<(f64, Rollout), ModelError> {
        let mut g = Eager;
        let (loss, rollout) = self.full_forward(&mut g, idx, sample, n, record)?;
        Ok((loss.item(), rollout))
    }

    /// Encodes `length` copies of `item` and measures how much the written
    /// rows differ: the largest L∞ distance between any two rows whose
    /// cumulative write attention exceeds 0.5.
    pub fn repeated_element_probe(&self, item: u8, length: usize, n: usize) -> Result<f64, ModelError> {
        if n < length {
            return Err(ModelError::MemoryTooSmall { n, len: length });
        }
        let mut g = Eager;
        let bound = self.bind(&mut g, &[]);
        let main = vec![crate::tasks::item_bits(item); length];
        let enc = self.encode(&mut g, &bound, &main, n, true)?;
        let mut cumulative = vec![0.0; n];
        for w in &enc.history {
            for (c, v) in cumulative.iter_mut().zip(w.data()) {
                *c += v;
            }
        }
        let mem = &enc.state.memory;
        let rows: Vec<usize> = (0..n).filter(|&i| cumulative[i] > 0.5).collect();
        let mut worst: f64 = 0.0;
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                let d = mem
                    .row(i)
                    .iter()
                    .zip(mem.row(j))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(d);
            }
        }
        Ok(worst)
    }
}
