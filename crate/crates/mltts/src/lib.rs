//! Desk-scale multilingual text-to-speech training framework.
//!
//! Implements a trainable multilingual TTS core on a synthetic corpus:
//! a language-conditioned parameter generator for the text encoder, domain
//! adversarial speaker classification through a gradient reversal layer,
//! a speaker regularization loss, monotonic alignment search, and a
//! deterministic duration predictor with zero-vector speaker substitution
//! for cross-lingual inference. Every trained component is backed by
//! finite-difference gradient checks or brute-force oracles.

pub mod alignment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mechanisms;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
