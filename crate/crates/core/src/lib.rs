//! Learning-to-compare captioning: describe the differences between two
//! images by pooling segmentation-masked features into part nodes,
//! reasoning over them with a graph network, and decoding the node
//! differences with an LSTM that is also trained on single-image captions.

pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
