//! Evaluation: metrics, dataset adapters, the synthetic benchmark with its
//! oracle providers, and run reports.

pub mod datasets;
pub mod metrics;
pub mod oracle;
pub mod report;
pub mod synthetic;
