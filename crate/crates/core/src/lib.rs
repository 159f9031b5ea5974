//! Random-parity representation, backbone expansion and switching lemma for the
//! space-time (path-integral) transverse-field Ising model, with exact oracles
//! and a continuous-time cluster Monte Carlo sampler.

pub mod backbone;
pub mod domain;
pub mod error;
pub mod observables;
pub mod mcmc;
pub mod oracle;
pub mod parity;
pub mod rng;
pub mod stats;
pub mod switching;

pub use domain::{Boundary, Lattice, Params, Point, Region, Site, TimeDomain, Topology};
pub use error::{Error, Result};
pub use rng::Streams;
pub use stats::Estimate;
