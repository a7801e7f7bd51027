pub mod autoencoder;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod degradation;
pub mod error;
pub mod flow;
pub mod image_io;
pub mod lq_cond;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod prompt;
pub mod rng;

pub use error::{Error, Result};
