//! `ecmt` command-line pipeline and HTTP service.

pub mod app;
pub mod error;
pub mod manifest;
pub mod measure;
pub mod service;

pub use error::CliError;
