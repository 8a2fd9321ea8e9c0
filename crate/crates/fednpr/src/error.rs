//! Crate-wide error type; every fallible public operation returns [`Result`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error(
        "sinkhorn did not converge: marginal violation {residual:.3e} after {iters} iterations (tolerance {tol:.3e})"
    )]
    SinkhornDiverged {
        residual: f64,
        iters: usize,
        tol: f64,
    },

    #[error("sub-cluster {cluster} received no mass")]
    EmptyCluster { cluster: usize },

    #[error("no prototypes stored for labeled class {class}")]
    MissingPrototypes { class: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("payload format error: {0}")]
    Payload(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("run failed at {context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
