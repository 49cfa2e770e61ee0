//! Topology and line-impedance learning for radial distribution grids.
//!
//! Only end-user (leaf) buses are metered: voltage magnitude plus active and
//! reactive injection. Every intermediate bus is hidden, and neither its
//! existence nor its count is known in advance. The pipeline is
//!
//! 1. [`moments`]: second moments of `(v, p, q)` at the metered buses are
//!    turned into effective-resistance and effective-reactance distances.
//! 2. [`rg`]: recursive grouping rebuilds the latent tree from the additive
//!    resistance distances, synthesising hidden buses as it goes.
//! 3. [`learner`]: line reactances are fitted on the recovered topology.
//!
//! [`lcpf`] is a linearised coupled power-flow simulator used to produce
//! synthetic measurements and closed-form moments, and [`benchmark`] holds the
//! random-grid generator, scoring metrics and experiment sweeps.

pub mod benchmark;
pub mod error;
pub mod grid;
pub mod lcpf;
pub mod learner;
pub mod moments;
pub mod rg;
pub mod seed;

pub use error::{Error, Result};
pub use grid::{Edge, Grid, Node, ValidationReport, Violation, WeightMode};
pub use lcpf::{InjectionSpec, MeasurementSet, NodeInjection};
pub use learner::{LearnConfig, LearnedGrid};
pub use moments::{DistanceMatrix, MomentSet};
pub use rg::{LearnedTree, RgConfig, Tau};
