// SPDX-License-Identifier: MIT OR Apache-2.0

//! Change point detection with masked-attention sequence models.
//!
//! The pipeline: [`data`] generates labelled sequences, [`model`] maps each
//! sequence to per-step change probabilities, [`losses`] scores them with the
//! expected-delay / expected-false-alarm pair (or BCE), [`metrics`] reports
//! F1, Covering and detection-curve area, and [`training`] runs the
//! multi-seed comparison protocol.

#![deny(unsafe_code)]

pub mod data;
pub mod error;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod report;
pub mod training;

pub use error::{CpdError, Result};
