//! Batch evaluation harness for LLM-driven cross-domain recommendation.
//!
//! The pipeline runs in fixed stages:
//!
//! 1. [`corpus`] loads review/metadata dumps (or generates a synthetic corpus),
//! 2. [`filtering`] applies the rating, activity, common-user and
//!    history-length filters to a (source, target) pair,
//! 3. [`taskgen`] turns each surviving user into a [`taskgen::CdrTask`],
//! 4. [`prompting`] renders the four-section prompt for every shuffle,
//! 5. [`llm`] dispatches prompts to an HTTP or mock provider,
//! 6. [`parse`] recovers a ranking from the raw completion text,
//! 7. [`evaluation`] scores rankings with HIT/MAP/NDCG at 1, 5 and 10.
//!
//! [`harness`] wires the stages together from a JSON config.

pub mod corpus;
pub mod evaluation;
pub mod filtering;
pub mod harness;
pub mod llm;
pub mod parse;
pub mod prompting;
pub mod rng;
pub mod taskgen;

pub use corpus::{DomainDataset, Interaction, SyntheticSpec};
pub use evaluation::{MetricReport, MetricVector};
pub use filtering::{CrossDomainCohort, FilterConfig};
pub use harness::{ExperimentConfig, RunManifest};
pub use parse::ParsedRanking;
pub use taskgen::{CdrTask, TaskGenConfig};
