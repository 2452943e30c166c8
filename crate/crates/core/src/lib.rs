//! Memory-augmented encoder-solver networks.
//!
//! An encoder controller writes a sequence into an external soft-attention
//! memory; one or more solver controllers read that memory (plus an optional
//! auxiliary sequence) to complete a working-memory task. Encoders can be
//! trained end to end, jointly across several solvers, and then frozen and
//! reused by freshly initialized solvers.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod controller;
pub mod evaluator;
pub mod experiments;
pub mod memory;
pub mod model;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use autodiff::{AdError, Eager, Graph, Tape, Var};
pub use model::{Handoff, MaesAssembly, ModelDims, SolverSpec};
pub use params::{ParamId, ParameterStore};
pub use tasks::{Task, TaskSample};
pub use tensor::Tensor;
