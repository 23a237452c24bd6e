//! File formats, data loading and the command-line front end for
//! `vitpose-core`.

pub mod checkpoint;
pub mod cli;
pub mod coco;
pub mod config;
pub mod error;
pub mod image_io;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
