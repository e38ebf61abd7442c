//! Training-free hallucination scoring over recorded LLM generation traces.
//!
//! A [`Trace`] holds the per-layer hidden states of the generated tokens, two
//! reduced attention vectors per layer and four logit summaries per token.
//! From it the crate computes the intra-layer dispersion score, the
//! attention-guided inter-layer drift score and their batch-normalized fusion
//! (D²HScore), seven baseline uncertainty scores, and the ranking metrics used
//! to compare detectors (AUROC, FPR@95, AUPR).
//!
//! Traces are persisted in the `.d2ht` binary container (see [`io`]).

pub mod baselines;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pca;
pub mod pipeline;
pub mod record;
pub mod score;
pub mod synth;
pub mod trace;

pub use error::{FormatError, MetricError, ScoreError};
pub use record::{Detector, Label, ScoreRecord};
pub use trace::{
    validate_trace, AttnReduction, Element, Matrix, TokenLogitSummary, Trace, TraceMeta, Violation,
};
