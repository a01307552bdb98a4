//! Strong lottery tickets for multi-head attention and normalization-free
//! transformers: subset-sum mask construction, error budgets, toy training,
//! edge-popup search and the experiment harness.

pub mod attention;
pub mod cli;
pub mod construct;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod popup;
pub mod rng;
pub mod selftest;
pub mod subset_sum;
pub mod train;

pub use error::{Result, SltError};
