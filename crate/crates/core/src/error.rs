use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("kernel {kernel:?} does not fit padded input {input:?}")]
    KernelTooLarge { kernel: Vec<usize>, input: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error(
        "Q is rank deficient: null space of dimension {null_dim} \
         (rank {rank} of {dim}, smallest eigenvalues {smallest:?})"
    )]
    RankDeficient {
        rank: usize,
        dim: usize,
        null_dim: usize,
        smallest: Vec<f64>,
    },

    #[error("regime mismatch: {0}")]
    Regime(String),

    #[error("ground truth unavailable: {0}")]
    MissingGroundTruth(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("gradient isolation violated: {0}")]
    Isolation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::RankDeficient { .. } | Error::NotSymmetric(_) | Error::Isolation(_)
        )
    }
}
