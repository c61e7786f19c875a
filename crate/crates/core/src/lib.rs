pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use task::{Environment, Task};
