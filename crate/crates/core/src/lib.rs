pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod masks;
pub mod numerics;
pub mod reader;
pub mod retriever;
pub mod textproc;
pub mod trainer;

pub use error::{Error, Result};
