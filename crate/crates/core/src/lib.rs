//! Retrieval-context engineering for repository-level code completion.
//!
//! The crate is `no_std` (it only needs `alloc`). Everything that touches the
//! filesystem, the network or a command line lives in the `ctxfilter` crate.
//!
//! Pipeline overview:
//!
//! * [`corpus`] holds repositories and completion instances in memory.
//! * [`chunk`] slices cross-file code into sliding windows and ranks them by
//!   Jaccard similarity against the in-file query.
//! * [`backend`] abstracts the code model; [`mock`] provides deterministic
//!   stand-ins used by tests and the synthetic corpus.
//! * [`label`] scores each retrieved chunk by the relative change in target
//!   NLL and classifies it as positive, neutral or negative.
//! * [`dataset`] samples targets and verbalizes labeled instances into
//!   supervised training records.
//! * [`engine`] runs the filter-then-generate state machine over signal tokens.
//! * [`metrics`] and [`eval`] score completions and compare strategies.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backend;
pub mod chunk;
pub mod corpus;
pub mod dataset;
pub mod engine;
pub mod eval;
pub mod label;
pub mod metrics;
pub mod mock;
pub mod prompt;
pub mod synth;
pub mod tokens;

pub use backend::{
    BackendError, BackendRequest, BackendResponse, Generator, LikelihoodQuery, SequenceLogprob,
    SignalDistribution, TokenCounter,
};
pub use chunk::{
    build_index, chunk_file, jaccard, tokenize, ChunkerConfig, CodeChunk, CrossFileIndex,
    RetrievalResult, Retriever, ScoredChunk,
};
pub use corpus::{CompletionInstance, RepoSnapshot, Setting, SourceFile};
pub use engine::{CompletionResult, EngineConfig, EngineTrace, StopReason};
pub use label::{ContributionScore, LabelerConfig, LabeledChunk, Polarity, PolarityLabel};
pub use prompt::{FimMarkers, PromptMode, PromptPlan, Segment, SegmentRole, SignalTokens};
