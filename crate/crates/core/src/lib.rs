//! Register-augmented selective-scan needle tracker.
//!
//! The crate is layered bottom-up: [`numerics`] provides arrays and
//! reverse-mode differentiation, [`ssm`] the state-space kernels and block,
//! [`registers`] the register extractor/retriever and bank, [`rdloss`] the
//! register regularisers and tracking loss, [`tracker`] the end-to-end model,
//! [`synthdata`] the synthetic sequence generator and [`harness`] training,
//! evaluation, ablations and benchmarks.

pub mod error;
pub mod harness;
pub mod image;
pub mod numerics;
pub mod rdloss;
pub mod registers;
pub mod ssm;
pub mod synthdata;
pub mod tracker;

pub use error::{Error, Result};
