//! Pipeline orchestration, external service clients, the annotation server
//! and the benchmark runner behind the `webcurate` command.

pub mod benchmark;
pub mod clients;
pub mod config;
pub mod pipeline;
pub mod server;
