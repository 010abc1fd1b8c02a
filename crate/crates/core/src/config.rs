//! Engine-wide numeric tolerances.

/// Tolerances used by validation and conditioning throughout the engine.
///
/// The defaults are fixed engine-wide; construct a custom value and pass it to
/// [`crate::network::Network::from_nodes_with`] to override them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Maximum allowed absolute element of `Q - Qᵀ` for a covariance matrix.
    pub symmetry: f64,
    /// Positive-semidefiniteness slack: the smallest eigenvalue of a
    /// covariance must be `≥ -psd_slack · (1 + trace/dim)`.
    pub psd_slack: f64,
    /// Positive-definiteness floor for conditioning: the evidence block's
    /// smallest eigenvalue must be `> conditioning · (1 + trace/dim)`.
    pub conditioning: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            symmetry: 1e-9,
            psd_slack: 1e-8,
            conditioning: 1e-10,
        }
    }
}
