//! Block library, neck/head builders, pruning and evaluation for a small
//! YOLO-style detector running on a reverse-mode tape.

pub mod autograd;
pub mod blocks;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod io;
pub mod model;
pub mod neck;
pub mod ops;
pub mod prune;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, GraphBuilder};
pub use model::{Model, ModelConfig, Variant};
pub use rng::SplitMix64;
pub use tensor::Tensor;
