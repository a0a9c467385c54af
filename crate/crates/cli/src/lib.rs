//! IO companion for the evaluation pipeline: file formats, configuration,
//! stage orchestration and reporting. The algorithmic core stays `no_std`;
//! everything that touches the filesystem lives here.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod stages;
pub mod tensor;
