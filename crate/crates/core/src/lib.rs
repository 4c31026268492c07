//! Just-in-time adaptive feedback on student strategy essays.

pub mod analytics;
pub mod assets;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod domain;
pub mod gateway;
pub mod io;
pub mod prompt;
pub mod service;
pub mod sim;
