use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty sub-batch")]
    EmptySubBatch,
    #[error("degenerate sub-batch: subset {subset} selects {rows} row(s), need at least 2")]
    DegenerateSubBatch { subset: String, rows: usize },
    #[error("no normalization unit for subset {0}")]
    MissingUnit(String),
    #[error("IN undefined for single-feature rows")]
    InstanceNormSingleFeature,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        value: f64,
    },
    #[error("{context}: line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
