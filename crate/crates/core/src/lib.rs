//! Knockoff-based controlled variable selection from summary statistics.
//!
//! The crate covers the full path from GWAS-style inputs to a selection set
//! with false discovery rate control:
//!
//! * build a knockoff model from a feature covariance (`knockoff`),
//! * reconstruct surrogate data from full summary statistics (`reconstruct`),
//! * score features with marginal, lasso, square-root-lasso, or
//!   pseudo-lasso statistics (`solvers`, `pipelines`),
//! * threshold the scores with single-, multi-, or group-knockoff filters
//!   (`filter`),
//! * and, separately, conditional randomization p-values (`crt`) and
//!   multi-study score merging (`meta`).
//!
//! `sim` drives power/FDR experiments over replicated synthetic datasets;
//! replicated work is data-parallel behind the `parallel` feature with a
//! sequential fallback that produces byte-identical results.

pub mod crt;
pub mod error;
pub mod filter;
pub mod knockoff;
pub mod meta;
pub mod reconstruct;
pub mod sim;
pub mod solvers;
pub mod numkit;
pub mod par;
pub mod pipelines;

pub use error::{Error, Result};
