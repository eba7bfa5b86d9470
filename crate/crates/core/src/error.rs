use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network needs at least one {0}")]
    Empty(&'static str),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("vertex `{0}` has a non-finite coordinate")]
    NonFiniteCoordinate(String),
    #[error("edge `{edge}` references unknown vertex `{vertex}`")]
    DanglingVertex { edge: String, vertex: String },
    #[error("edge `{0}` is a self-loop")]
    SelfLoop(String),
    #[error("edge `{edge}` has nonpositive length {length}")]
    NonPositiveLength { edge: String, length: f64 },
    #[error("network is disconnected ({0} components)")]
    Disconnected(usize),
    #[error("edge {edge} is not incident to vertex {vertex}")]
    NotIncident { vertex: usize, edge: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("edge {edge} has {cells} cells, need at least 2")]
    TooFewCells { edge: usize, cells: usize },
    #[error("need at least one time step")]
    NoSteps,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("nonzero flux {flux} through zero density on edge {edge}, step {step}, face {face}")]
    FluxWithoutMass { edge: usize, step: usize, face: usize, flux: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("negative mass in {0}")]
    NegativeMass(&'static str),
    #[error("endpoint masses {initial} and {terminal} must both equal 1")]
    MassMismatch { initial: f64, terminal: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("constraint system is singular")]
    Singular,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("negative mass")]
    NegativeMass,
    #[error("masses differ: {0} vs {1}")]
    MassMismatch(f64, f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("linear program failed: {0}")]
    Lp(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("time step {dt} exceeds the stability bound {bound}")]
    Cfl { dt: f64, bound: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
