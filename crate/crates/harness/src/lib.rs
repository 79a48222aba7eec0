//! Evaluation harness: a scripted user that drives episodes, gateway test
//! doubles, log metrics, shadow replay and report tables.

pub mod doubles;
pub mod metrics;
pub mod report;
pub mod shadow;
pub mod trial;
pub mod user;
