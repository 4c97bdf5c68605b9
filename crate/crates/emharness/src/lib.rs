//! Entity matching with chat-completion models.
//!
//! The crate covers the full loop of a matching experiment: loading benchmark
//! pair files ([`records`]), rendering prompt designs ([`promptkit`]),
//! selecting in-context demonstrations ([`demos`]), querying backends with
//! caching and retries ([`llmclient`]), turning completions into match
//! decisions ([`matcher`]), scoring and cost accounting ([`evaluation`]),
//! structured decision explanations ([`explain`]), and model-assisted error
//! analysis ([`errorlab`]).

pub mod demos;
pub mod errorlab;
pub mod evaluation;
pub mod explain;
pub mod llmclient;
pub mod matcher;
pub mod promptkit;
pub mod records;
pub mod textmetrics;
