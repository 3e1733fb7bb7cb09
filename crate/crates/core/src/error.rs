use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error(
        "Erdős–Rényi sampling produced no connected graph in {attempts} attempts \
         (n = {nodes}, edge probability = {edge_probability}); raise the edge probability"
    )]
    ConnectivityFailure {
        attempts: u32,
        nodes: usize,
        edge_probability: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("system is not positive definite: {0}")]
    SingularSystem(String),

    #[error("eigendecomposition failed: {0}")]
    Eigensolver(String),

    #[error("non-finite state at iteration {iteration}; the step size is likely too large")]
    NonFiniteState { iteration: usize },

    #[error("non-positive internal time t = {0}")]
    NonPositiveTime(f64),

    #[error("neighbor broadcasts for agent {agent} do not match its graph row")]
    NeighborMismatch { agent: usize },

    #[error("invalid Butcher tableau: {0}")]
    InvalidTableau(String),

    #[error("one-step errors reached {error:e} (below 1e-14); order cannot be estimated")]
    DegenerateError { error: f64 },

    #[error("rate fit needs at least {needed} points in the tail window, found {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("metric is not positive at trace index {index}; refit on the pre-floor window")]
    NonPositiveMetric { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported objective family: {0}")]
    UnsupportedFamily(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("agent {agent}: {source}")]
    Agent {
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn at_agent(self, agent: usize) -> Self {
        Error::Agent {
            agent,
            source: Box::new(self),
        }
    }

    /// Strips any agent wrapper and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Agent { source, .. } => source.root(),
            other => other,
        }
    }
}
