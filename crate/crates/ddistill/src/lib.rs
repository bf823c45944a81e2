//! Dataset distillation toolkit around [`ddistill_core`]: dataset loading
//! and generation, checkpoint and artifact file formats, the staged
//! squeeze/recover/relabel/posttrain pipeline, and the `ddistill` CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod softlabel;
pub mod synthset;
