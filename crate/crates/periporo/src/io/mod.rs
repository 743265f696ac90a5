//! Problem files, snapshots and reports.

pub mod deck;
pub mod report;
pub mod run;
pub mod snapshot;
