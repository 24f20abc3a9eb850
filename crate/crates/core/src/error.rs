use std::io;

use thiserror::Error;

/// Errors produced by the engine, the protocols and the transport.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch norm needs a batch larger than one in {0} mode")]
    DegenerateBatch(&'static str),

    #[error("backward requires a train-mode forward cache: {0}")]
    Cache(String),

    #[error("invalid layer: {0}")]
    Layer(String),

    #[error("invalid model description at line {line}: {msg}")]
    Description { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("pending forward: {0}")]
    Pending(String),

    #[error("collector: {0}")]
    Collector(String),

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("data: {0}")]
    Data(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("wire: {0}")]
    Wire(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("timed out after {0} ms waiting for a client")]
    Timeout(u64),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("cost model: {0}")]
    Cost(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
