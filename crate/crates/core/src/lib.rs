//! Dynamic optimal transport on metric graphs with mass storage at vertices.

pub mod action;
pub mod error;
pub mod gradflow;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod netgraph;
pub mod solver;

pub use error::{FlowError, GridError, MetricError, NetworkError, SolveError};
