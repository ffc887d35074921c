//! Numerical laboratory for a kick-forced viscous Burgers equation and the
//! directed polymer in a random potential that represents it.
//!
//! The model lives on integer times and a continuous line, truncated here to a
//! uniform grid. Between consecutive integer times mass diffuses with a
//! Gaussian kernel of variance `2*kappa`; at each integer time the state is
//! reweighted by `exp(-F_k(x)/(2*kappa))` where `F_k` is a random potential,
//! independent across times and statistically stationary in space. Everything
//! downstream (partition functions, polymer measures, velocity profiles) is
//! built from that one transfer step, carried end to end in log space.
//!
//! Module map:
//! * [`lattice`]: grids, log-densities, the heat kernel row and the transfer step
//! * [`env`]: random potential generators, transforms, snapshots
//! * [`partition`]: point-to-point partition functions and consistency residuals
//! * [`polymer`]: path measures, marginals, sampling, stochastic order checks
//! * [`burgers`]: Hopf-Cole states, kick evolution, velocity extraction, pullback runs
//! * [`stats`]: shape function, fluctuation exponents, coupling-decay estimators
//! * [`config`], [`report`], [`experiments`]: reproducible experiment plumbing used by the CLI

pub mod burgers;
pub mod config;
pub mod env;
pub mod experiments;
pub mod lattice;
pub mod partition;
pub mod polymer;
pub mod report;
pub mod stats;

use thiserror::Error;

/// Crate-wide error type. Numerical routines return structured errors instead
/// of panicking so the CLI can report which precondition failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("total mass collapsed to zero: {0}")]
    MassCollapse(String),

    #[error("initial profile outside the attraction basin: {0}")]
    BasinCondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
