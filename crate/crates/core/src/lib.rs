//! Semi-automated annotation of discrete-state frame sequences.
//!
//! A hidden Markov model over object states turns noisy per-frame classifier
//! decisions into stable-interval labels. Frames around detected state changes
//! are labelled from confident classifications, intervals whose decisions are
//! explained by a single unchanged state are labelled automatically, and
//! everything else is routed to a human annotation queue.
//!
//! Modules:
//!
//! - [`hmm`]: Viterbi decoding, unchanged-state likelihood, parameter estimation.
//! - [`pipeline`]: segmentation, change handling, stable-state labelling, runs.
//! - [`providers`]: frame-stream simulator and the text record format.
//! - [`evaluation`]: oracle replay, effort/accuracy metrics, parameter sweeps.
//! - [`service`]: the leased annotation queue and its append-only log.
//! - [`pupil`]: CDF-threshold pupil extraction on grayscale eye crops.

pub mod evaluation;
pub mod hmm;
pub mod pipeline;
pub mod providers;
pub mod pupil;
pub mod service;

pub use hmm::{DecodeResult, HmmError, HmmModel, StableScore, StateIndex, StateSpace};
pub use pipeline::{
    AnnotationPacket, AnnotationRun, Annotator, FrameLabel, FrameRecord, LabelRecord, LabelSource,
    PacketReason, PipelineParams,
};
pub use providers::{RecordStream, SimConfig};
