//! Training harness, verification commands and result emission around
//! the core library.

pub mod checks;
pub mod compare;
pub mod config;
pub mod plot;
pub mod quad;
pub mod runlog;
pub mod samples;
pub mod trainer;
