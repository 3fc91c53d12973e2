use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dangling tensor id {0}")]
    DanglingReference(usize),
    #[error("cyclic operator graph, witness: {0:?}")]
    CyclicGraph(Vec<usize>),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("split policy error on operator {op}: {msg}")]
    SplitPolicyError { op: usize, msg: String },
    #[error("propagation result does not match the graph it is applied to")]
    StaleResultError,
    #[error("operator {0} has no propagated task count")]
    PropagationMissing(usize),
    #[error("slice error: {0}")]
    SliceError(String),
    #[error("uncovered region: {0}")]
    UncoveredRegion(String),
    #[error("routing error: {0}")]
    RoutingError(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("unsupported SSC version {0}")]
    VersionError(u32),
    #[error("simulation deadlock: {0}")]
    Deadlock(String),
    #[error("event merge produced a self-waiting task {0}")]
    SelfWait(usize),
}
