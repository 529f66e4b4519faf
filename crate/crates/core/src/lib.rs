//! Anomaly segmentation toolkit on a synthetic segmentation world.
//!
//! The crate is organised bottom-up:
//!
//! - [`rng`], [`grid`], [`tensorio`] and [`linalg`] are plumbing shared by everything else.
//! - [`synthworld`] generates labeled scenes with trained classes, proxy anomalies
//!   and held-out anomalies.
//! - [`toynet`] is a small per-pixel classifier with hand-written backpropagation and
//!   every training objective (cross-entropy, entropy maximization, distillation).
//! - [`infostat`] holds information-theoretic scores on vector data.
//! - [`scoring`] turns network outputs into per-pixel anomaly maps.
//! - [`evalmetrics`] and [`segments`] evaluate those maps at pixel and segment level.
//! - [`discovery`] clusters anomaly crops to find and pseudo-label a novel class.

pub mod discovery;
pub mod error;
pub mod evalmetrics;
pub mod grid;
pub mod infostat;
pub mod linalg;
pub mod rng;
pub mod scoring;
pub mod segments;
pub mod synthworld;
pub mod tensorio;
pub mod toynet;

pub use error::{Error, Result};
pub use grid::{Grid, LabelMap, IGNORE_LABEL};
