//! Writing-manner alignment for instruction datasets.
//!
//! * [`corpus`]: parse, classify, split and reassemble LLaVA-style datasets
//! * [`prompts`]: rewrite and review prompt rendering
//! * [`backend`]: remote chat-completion and deterministic reference backends
//! * [`aligner`]: the rewrite/review pipeline with checkpointing and stats
//! * [`gap`]: perplexity indicator of the writing-manner gap
//! * [`assessment`]: blind human assessment sessions and their HTTP API

pub mod aligner;
pub mod assessment;
pub mod backend;
pub mod corpus;
pub mod gap;
pub mod parallel;
pub mod prompts;

pub use aligner::{AlignConfig, AlignedCorpus, Aligner, AlignmentReport, RoundOutcome};
pub use backend::{Backend, BackendDescriptor, ReferenceBackend, SamplingConfig};
pub use corpus::{FormatClass, InstructionRecord, QARound, TagMap};
pub use parallel::WorkerPool;
pub use prompts::{PromptSet, RewriteVariant};
