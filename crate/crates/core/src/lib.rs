pub mod attention;
pub mod body_encoder;
pub mod data;
pub mod decoder;
pub mod edge_encoder;
pub mod error;
pub mod lcaf;
pub mod nn;
pub mod supervision;
pub mod train;

pub use error::{ModelError, Result};
