use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("invalid case: {0}")]
    Semantic(String),

    #[error("degenerate impedance on branch {from}-{to} (r = x = 0)")]
    DegenerateImpedance { from: usize, to: usize },

    #[error("unobservable system: rank {rank} < {n}")]
    Unobservable { rank: usize, n: usize },

    #[error("singular system matrix")]
    Singular,

    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NonConvergence { iterations: usize, mismatch: f64 },

    #[error("invalid degrees of freedom: m = {m}, n = {n}")]
    DegreesOfFreedom { m: usize, n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cusum monitor is not calibrated")]
    Uncalibrated,

    #[error("stream too short: {len} samples, need {need}")]
    StreamTooShort { len: usize, need: usize },

    #[error("duplicate point at row {0}: zero distance to every other row")]
    DuplicatePoints(usize),

    #[error("perplexity {perplexity} infeasible for {n} points")]
    Perplexity { perplexity: f64, n: usize },

    #[error("whitening failed: covariance rank {rank} < {k} components")]
    Whitening { rank: usize, k: usize },

    #[error("attack abstained: {0}")]
    Abstain(String),

    #[error("no branch at position {0}")]
    UnknownLine(usize),

    #[error("switching out the branch at position {0} islands the network")]
    Islanding(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("mixed configurations: {0}")]
    MixedConfigs(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
