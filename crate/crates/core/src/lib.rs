//! Unsupervised nighttime optical flow through appearance and boundary
//! adaptation, at desk scale.

pub mod appearance;
pub mod boundary;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod flowcore;
pub mod formats;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod raster;
pub mod retinex;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use raster::{FlowField, Image, Mask};
pub use tensor::Tensor;
