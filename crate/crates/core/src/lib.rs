//! Hierarchy-aware analysis and credit assignment for reasoning traces.
//!
//! The crate is organised around the pipeline it implements:
//!
//! * [`trace`] loads and validates line-delimited reasoning traces.
//! * [`sg`] mines strategic grams (recurring high-level reasoning phrases)
//!   from successful solutions and ships the default lexicon.
//! * [`classify`] matches strategic grams in text and labels every token as
//!   planning or execution.
//! * [`metrics`] computes entropy, perplexity, diversity and Pass@K series.
//! * [`credit`] implements group-relative advantages, the hierarchy-aware
//!   amplification of planning-token credit, and the distribution-matching
//!   view of the policy-gradient update.
//! * [`sim`] is a small hierarchical environment and tabular softmax trainer
//!   used to study the learning dynamics end to end.
//! * [`judge`] talks to a chat-completions endpoint to categorise failures.

pub mod classify;
pub mod credit;
pub mod error;
pub mod judge;
pub mod metrics;
pub mod sg;
pub mod sim;
pub mod text;
pub mod trace;

pub use classify::{label_tokens, match_sgs, SgMatch, TokenClassMask};
pub use credit::{AdvantageArray, AdvantageKind, TargetDistribution};
pub use error::{Error, Result};
pub use metrics::{MetricSeries, SeriesPoint, StepWindow, Unit};
pub use sg::{Gram, SgCluster, SgSet};
pub use trace::{RolloutGroup, TokenRecord, Trajectory};
