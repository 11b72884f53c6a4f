//! Multiview-to-UV texture synthesis at desk scale.

pub mod error;
pub mod par;
pub mod pipeline;
pub mod attention;
pub mod baker;
pub mod config;
pub mod encoding;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod tensor;
pub mod texture;
pub mod trainer;

pub use error::{Error, Result};
