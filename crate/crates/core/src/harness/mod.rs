//! Datasets, reports, benchmarks and privacy audits.

pub mod dataset;
pub mod audit;
pub mod report;
