//! Toy training harness: a small causal LM behind the fusion pipeline,
//! synthetic tasks whose labels isolate temporal vs spatial understanding,
//! the training recipes, and a finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod lm;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use gradcheck::{grad_check, GradCheckReport};
pub use lm::{ToyLlm, ToyLlmConfig};
pub use model::{build_pipeline, Model, PipelineConfig};
pub use optim::{lr_at, Adam, Schedule};
pub use synth::{make_synth_task, SynthSample, SynthTask, SynthTaskKind};
pub use train::{evaluate, smooth, stages_for, train, MetricsRow, Recipe, RecipeConfig, TrainResult};
