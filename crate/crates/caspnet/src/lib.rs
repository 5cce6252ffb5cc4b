//! Grid-based multi-agent motion prediction: bird's-eye-view rasterization
//! of agent histories and map context, a pyramid encoder-decoder with
//! recurrent temporal aggregation and dilated-convolution attention,
//! heatmap training with a focal objective, multi-modal trajectory
//! extraction, and standard forecasting metrics.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod extraction;
pub mod geom;
pub mod griddump;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod scene;
pub mod scenegen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
