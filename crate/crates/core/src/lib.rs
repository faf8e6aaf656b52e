//! Segmenter: a transformer encoder-decoder for semantic segmentation.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, SegmenterModel, Variant};
pub use tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
