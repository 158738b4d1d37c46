//! Train-once slimmable multi-task networks with preference- and
//! budget-driven sub-network search.

pub mod autograd;
pub mod container;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hv;
pub mod optim;
pub mod predictor;
pub mod search;
pub mod slimnet;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Array;
