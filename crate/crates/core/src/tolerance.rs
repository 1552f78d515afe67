use serde::{Deserialize, Serialize};

/// Numerical thresholds shared by all solvers.
///
/// Absolute values apply to unit-normalized problems; the `*_rel` entries are
/// multiplied by a problem-dependent norm at the point of use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Riccati residual certificate, scaled by `1 + ‖Y‖²`.
    pub res: f64,
    /// Eigenvalue matching distance.
    pub eig: f64,
    /// Largest accepted condition number of an invariant-subspace basis block.
    pub cond: f64,
    /// Stability margin relative to `‖H‖`.
    pub stab_rel: f64,
    /// Newton stopping threshold relative to `1 + ‖K‖_F`.
    pub newton_rel: f64,
    /// Best-response gap floor relative to `1 + ‖x0‖²`.
    pub gap_rel: f64,
    /// Cost symmetry / semidefiniteness threshold relative to `‖Q‖`.
    pub psd_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            res: 1e-9,
            eig: 1e-7,
            cond: 1e10,
            stab_rel: 1e-9,
            newton_rel: 1e-10,
            gap_rel: 1e-8,
            psd_rel: 1e-10,
        }
    }
}

impl Tolerances {
    /// Stability margin for a problem whose Hamiltonian has norm `h_norm`.
    pub fn stab(&self, h_norm: f64) -> f64 {
        self.stab_rel * h_norm.max(1.0)
    }
}
