//! Core library for LLM relation-extraction annotation: datasets and schemas,
//! prompt rendering, annotator backends, response parsing, evaluation,
//! reliability-weighted aggregation, cost estimation and the review workflow.

pub mod aggregation;
pub mod backends;
pub mod config;
pub mod costing;
pub mod dataset;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod prompting;
pub mod review;
pub mod rng;
pub mod store;
pub mod synth;
