//! Training-free key-space intervention for cross-attention.
//!
//! A prompt's missing concepts are masked out, the difference between the
//! original and masked key inputs is taken, and that difference is added
//! back to the keys during early sampling steps with a strength optimised
//! per step so the missing tokens' attention matches that of the concepts
//! that did appear. The backbone here is a seeded toy denoiser made only of
//! cross-attention layers.
//!
//! Modules:
//! - [`tensor`]: dense matrices and attention primitives
//! - [`text`]: tokenizer, embeddings, masking
//! - [`denoiser`]: toy model, sampler and attention traces
//! - [`oracle`]: present/missing concept partitioning
//! - [`engine`]: key difference, objective, strength schedule, full run
//! - [`metrics`]: intensity, coefficient of variation, AUC, entropy
//! - [`theorem`]: Monte Carlo checks of the perturbation bounds
//! - [`config`], [`trace_io`]: run configuration and trace files

pub mod config;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod seed;
pub mod tensor;
pub mod text;
pub mod theorem;
pub mod trace_io;

pub use denoiser::{init_model, run_sampler, AttentionTrace, DenoiserConfig, KeyHook, ToyDenoiser};
pub use engine::{run_delta_k, DeltaKRun, DeltaKey, ScheduleRecord, SchedulerConfig, StepContext};
pub use error::{Error, Result};
pub use oracle::{OracleConfig, OracleMode, OracleVerdict};
pub use tensor::{AttentionOutput, Matrix};
pub use text::{Concept, ConceptPartition, EmbeddingSeq, TokenSeq};
