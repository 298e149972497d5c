pub mod bilm;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod model;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
