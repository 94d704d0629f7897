//! File formats, dataset IO, checkpoints, experiment drivers and the
//! command line for `tlnet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod experiment;
pub mod kitti;
pub mod ppm;
pub mod report;
