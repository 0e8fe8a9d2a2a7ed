//! Engagement and churn analytics for app-usage event logs.
//!
//! The pipeline runs from raw events to daily per-user panels
//! ([`events`], [`panel`]), and from panels to churn definitions ([`rcmm`]),
//! ECDF engagement indicators ([`ecdf`]), harmonic-mean engagement scores
//! ([`score`]) and time-to-churn survival models ([`survival`],
//! [`dataset`], [`forest`]). [`synth`] generates seeded cohorts with known
//! ground truth and [`report`] assembles per-user report cards and churn
//! definition comparisons.

pub mod dataset;
pub mod ecdf;
pub mod error;
pub mod events;
pub mod features;
pub mod forest;
pub mod metric;
pub mod panel;
pub mod rcmm;
pub mod report;
pub mod score;
pub mod survival;
pub mod synth;

pub use error::{Error, Result};
