//! Zero-shot prompt optimization and multitask evaluation engine.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`registry`]: task catalog and corpus loading.
//! - [`prompt`]: hybrid prompt templates (soft slot, verbalizer options,
//!   description with input placeholders and a mask marker).
//! - [`gps`]: genetic prompt search over a pluggable scorer and mutator.
//! - [`mutation`]: mask-infill, back-translation and paraphrase mutators.
//! - [`backend`]: wire protocol, HTTP client with retries and bounded
//!   concurrency, in-process mocks and a loopback mock server.
//! - [`scoring`]: dev-set scoring of a template through a backend.
//! - [`metrics`]: AUC, micro-F1, string F1, Pos-F1 and ROUGE-1.
//! - [`dataset`]: training pool sampling, dev sets, n-gram contamination filter.
//! - [`soft_prompt`]: soft prompt composition for unseen tasks.
//! - [`self_training`]: embedding retrieval and pseudo-label self-training.

pub mod backend;
pub mod dataset;
pub mod gps;
pub mod metrics;
pub mod mutation;
pub mod prompt;
pub mod registry;
pub mod rng;
pub mod scoring;
pub mod self_training;
pub mod soft_prompt;
pub mod text;

pub use gps::{Candidate, CandidateId, GpsConfig, GpsResult};
pub use prompt::{PromptTemplate, RenderStyle, RenderedPrompt};
pub use registry::{Gold, LabeledExample, Registry, TaskSpec, TaskType};
