//! Self-supervised tactile representation learning toolkit.
//!
//! The crate is organized around the pipeline stages: [`data`] produces
//! tactile windows from manifests or the synthetic corpus generator,
//! [`encoder`] turns windows into token embeddings, [`ssl`] pretrains the
//! encoder with one of four objectives, [`tasks`] trains and evaluates
//! downstream probes, [`field`] recovers dense normal/shear fields without
//! labels, and [`harness`] orchestrates experiments end to end.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod field;
pub mod harness;
pub mod nn;
pub mod ssl;
pub mod tasks;

pub use error::{Error, Result};
