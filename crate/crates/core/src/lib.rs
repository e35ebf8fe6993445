// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod formats;
pub mod geometry;
pub mod grid;
pub mod knn;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod rasterizer;
pub mod scene;
pub mod sh;
pub mod synthetic;

pub use error::{Error, Result};
