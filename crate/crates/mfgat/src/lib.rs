//! Graph classification with multi-view fuzzy graph attention networks.
//!
//! The crate is organized in four layers:
//!
//! - [`autodiff`] — dense 2-D tensors, a reverse-mode differentiation tape,
//!   and finite-difference gradient verification;
//! - [`datasets`] — a TUDataset text-format parser, one-hot feature encoding,
//!   summary statistics, and seeded train/val/test splits;
//! - [`model`] — the MFGAT architecture (per-view transforms, fuzzy graph
//!   attention layers, learnable multi-view pooling) plus GCN, GAT,
//!   GraphSAGE, and FGAT baselines;
//! - [`training`] — Adam, early stopping, cross-validation, evaluation, and
//!   the view-count ablation harness.

pub mod autodiff;
pub mod datasets;
mod error;
pub mod model;
pub mod training;

pub use error::{Error, Result};
