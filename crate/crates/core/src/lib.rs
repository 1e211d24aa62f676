//! Duplicate bug report detection.
//!
//! The pipeline ingests and cleans reports ([`corpus`]), groups declared
//! duplicates into transitive clusters ([`graph`]), splits clusters into
//! leakage-free train/dev/test sets ([`split`]), embeds text ([`embed`]),
//! retrieves top-k candidates ([`retrieval`]), filters them with a pair
//! classifier ([`classifier`]) and measures accuracy against inference cost
//! ([`cascade`], [`metrics`], [`ledger`]).

pub mod cascade;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod graph;
pub mod ledger;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod service;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
