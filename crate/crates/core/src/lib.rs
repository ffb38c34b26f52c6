pub mod analysis;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nnmath;
pub mod objectives;
pub mod pipeline;
pub mod tasks;
pub mod train;
pub mod vocab;
pub mod wfh;

pub use error::{Result, WvlpError};
