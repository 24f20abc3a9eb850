#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]

pub mod collector;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedserver;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod split;
pub mod tensor;
pub mod transport;

pub use config::{RunConfig, DEFAULT_CONFIG};
pub use error::{Error, Result};
pub use experiment::{prepare, run, Execution, RunOutcome};
pub use protocol::{Protocol, ProtocolConfig, RunReport};
pub use tensor::{Scalar, Tensor};
