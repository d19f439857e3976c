//! Causal intervention modules inside a toy multimodal transformer.
//!
//! The crate covers the full loop: a synthetic world with injected object
//! co-occurrence bias, a from-scratch reverse-mode tensor library, a small
//! vision-language decoder with a confounder-attention projector and a
//! final-layer intervention module, confounder-dictionary estimation,
//! training, hallucination metrics, and representation analysis. The
//! `causal_core` module holds exact finite-model adjustment oracles that the
//! approximations are measured against.

pub mod analysis;
pub mod causal_core;
pub mod dictionary;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod model;
pub mod numkit;
pub mod par;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
