//! File formats, PNG IO, configuration, the evaluation harness and the
//! command line around `lrr-core`.

pub mod config;
pub mod evalbench;
pub mod formats;
pub mod pipeline;
pub mod pngio;
