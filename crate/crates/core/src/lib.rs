//! Goal-directed exact inference for Bayesian networks whose variables are
//! continuous vectors with linear-Gaussian relationships.
//!
//! A network is a DAG of vector-valued variables, each equal to a linear
//! combination of its parents plus independent Gaussian noise. Queries of the
//! form `P(X | Y, E = e*)` are answered by routing requests over an SPI tree,
//! resolving only the node distributions a query actually needs, and combining
//! them with three closed-form operations on a "generalized distribution"
//! value type: multiplication (node combination), integration (slot deletion),
//! and evidence substitution. Results are memoized per tree node, so repeated
//! queries and evidence-value changes cost no new combination work.
//!
//! Every answer can be checked against [`oracle`], a dense ground-truth engine
//! that builds the full joint Gaussian by triangular solves and conditions it
//! directly.
//!
//! Modules:
//! - [`network`]: network definition, validation, and graph queries.
//! - [`repr`]: the generalized-distribution value type and its operations.
//! - [`spi_tree`]: SPI tree construction (root choice, maximum cardinality
//!   search, attachment) and navigation.
//! - [`engine`]: query transformation, recursive resolution, caching, and
//!   evidence handling.
//! - [`oracle`]: dense joint-Gaussian reference engine and random-network
//!   generator.
//! - [`cli`]: command-line front end.

pub mod cli;
pub mod config;
pub mod engine;
mod linalg;
pub mod network;
pub mod oracle;
pub mod repr;
pub mod spi_tree;

pub use config::Tolerances;
pub use engine::{Diagnostics, EngineError, LmRequest, Query, QueryResult, Session};
pub use network::{Eccentricity, Network, NetworkError, NodeId, NodeSpec};
pub use oracle::JointMoments;
pub use repr::{Block, CombinedRepr, ReprError};
pub use spi_tree::{SpiForest, SpiTree, TreeError, TreeMode};
