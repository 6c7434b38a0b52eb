//! Factor-graph variational inference for precision-gated ensembles.
//!
//! Models are Forney-style factor graphs built from five factors (softdot,
//! exponential link, gamma, normal, equality). Inference minimizes the Bethe
//! free energy by closed-form message passing, with a natural-gradient
//! fixed-point solver on the edges next to an exponential link.

pub mod bfe;
pub mod engine;
pub mod error;
pub mod exponential_families;
pub mod factor_rules;
pub mod fixed_point;
pub mod graph;
pub mod models;
pub mod oracle;
pub mod special;

pub use nalgebra;

pub use bfe::{bethe_free_energy, BfeBreakdown};
pub use engine::{infer, predictive, InferenceConfig, Marginal, Marginals};
pub use error::{Error, Result};
pub use exponential_families::{Belief, GammaBelief, GaussianBelief, Message, MvGaussianBelief, Value};
pub use fixed_point::{SolveStatus, SolverConfig};
pub use graph::{build_schedule, validate_proper, FactorGraph, FamilyConstraint, LineType, NodeKind};
pub use models::{EnsembleData, Fitted, ModelKind, PgePriors};
