pub mod bench;
pub mod clam;
pub mod cli;
pub mod dino;
pub mod error;
pub mod memory;
pub mod model;
pub mod multitask;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod tensor;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
