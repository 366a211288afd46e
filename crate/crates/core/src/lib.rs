pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod correlation;
pub mod data;
pub mod error;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod hypernet;
pub mod init;
pub mod network;
pub mod retrain;
pub mod search;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
