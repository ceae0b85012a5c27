use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("tuning constant must be positive, got {0}")]
    NonpositiveTuning(f64),
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
    #[error("argument outside the domain: {0}")]
    Domain(String),
    #[error("degenerate scatter: every h-subset has rank below {dim}")]
    DegenerateScatter { dim: usize },
    #[error("subset size {h} outside [{lo}, {hi}]")]
    BadSubsetSize { h: usize, lo: usize, hi: usize },
    #[error("trimming count h = {h} outside [{lo}, {hi})")]
    BadTrim { h: usize, lo: usize, hi: usize },
    #[error("subset is rank deficient for a {dim}-dimensional fit")]
    RankDeficientSubset { dim: usize },
    #[error("robust scale is zero ({0})")]
    ZeroScale(&'static str),
    #[error("only {kept} observations survive outlier flagging, need at least {needed}")]
    AllFlagged { kept: usize, needed: usize },
    #[error("score scatter matrix is singular")]
    SingularScatter,
    #[error("no candidate dimension produced a valid factor fit")]
    NoValidDimension,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("no elemental start produced a valid fit")]
    NoValidStart,
    #[error("weighted design matrix is rank deficient")]
    RankDeficientWeighted,
    #[error("column {0} has zero variance")]
    ZeroVarianceColumn(usize),
    #[error("{got} regular observations, need at least {needed}")]
    TooFewRegularRows { got: usize, needed: usize },
    #[error("invalid simulation spec: {0}")]
    SpecInvalid(String),
    #[error("true model is not covered by the solution path")]
    TrueModelNotInPath,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
