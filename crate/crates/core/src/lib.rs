//! Detection of machine-generated news articles by scoring how consistent an
//! article's text is with its image-caption pairs.

pub mod adam;
pub mod cca;
pub mod checkpoint;
pub mod data;
pub mod entity;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{DidanDetector, DidanParams, ModelDims};
pub use tensor::{Scalar, Tensor};
