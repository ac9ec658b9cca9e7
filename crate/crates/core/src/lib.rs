pub mod abfnn;
pub mod attention;
pub mod augmentation;
pub mod dataset;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use numkernel::{Matrix, SeededRng};
