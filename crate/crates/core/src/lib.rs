//! Evidence-aware multi-hop question answering at desk scale.
//!
//! The crate covers the full loop: generating a synthetic distractor-setting
//! corpus, deriving answerability and evidentiality training sets from it,
//! training a small transformer reader with a target head and a deliberately
//! biased head, extracting pseudo evidence sentences by counterfactual
//! saliency, and evaluating answers, evidence, and confidence separation.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`corpus`]: document model, tokenizer, synthetic generator, loaders
//! - [`setgen`]: answerability / evidentiality instance construction
//! - [`model`]: the trainable reader (forward, backward, decode, checkpoints)
//! - [`interpreter`]: greedy counterfactual evidence extraction
//! - [`trainer`]: losses, regularizers, the delayed two-phase curriculum
//! - [`inference`]: paragraph-pair selection and sentence-level selection
//! - [`evaluation`]: answer/evidence metrics, challenge set, confidence curves
//! - [`runcfg`]: run configuration shared by the CLI

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod interpreter;
pub mod model;
pub mod runcfg;
pub mod setgen;
pub mod trainer;

pub use error::{Error, Result};
