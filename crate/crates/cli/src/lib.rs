//! Experiment runner for parallel cost aggregation: spec files, seeded
//! runs, paired-seed comparisons and figure data.

pub mod compare;
pub mod figures;
pub mod runner;
pub mod spec;
pub mod table;
