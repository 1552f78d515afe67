use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    // validation
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("cost weight Q is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("cost weight Q is not symmetric (asymmetry {asymmetry:e} exceeds {tolerance:e})")]
    AsymmetricCost { asymmetry: f64, tolerance: f64 },
    #[error("invalid coupling weight: {0}")]
    InvalidCoupling(String),

    // dense linear algebra
    #[error("real Schur decomposition did not converge")]
    SchurFailed,
    #[error("eigenvalue reordering failed: {0}")]
    ReorderFailed(String),
    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),

    // limit (w = 0) equations
    #[error("no stabilizing solution of the algebraic Riccati equation: {0}")]
    NoStabilizingSolution(String),
    #[error("every candidate invariant subspace has an ill-conditioned or singular upper block")]
    SubspaceDegenerate,
    #[error("exhaustive branch enumeration requested for n = {n} above the cap {cap}")]
    BranchCapExceeded { n: usize, cap: usize },
    #[error("spectrum split mismatch (distance {distance:e} exceeds {tolerance:e})")]
    SpectrumMismatch { distance: f64, tolerance: f64 },
    #[error("matrix does not solve the aggregate Riccati equation (residual {residual:e} above {bound:e})")]
    ResidualTooLarge { residual: f64, bound: f64 },
    #[error("aggregate closed loop is not asymptotically stable (spectral abscissa {abscissa:e})")]
    UnstableAc2 { abscissa: f64 },
    #[error("assembled value matrix is inconsistent (mismatch {mismatch:e})")]
    AsymmetryTooLarge { mismatch: f64 },

    // finite-w solve
    #[error("Newton iteration did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("linearized Riccati operator is singular")]
    SingularJacobian,
    #[error("solve failed at M = {players}: {source}")]
    SweepFailed {
        players: usize,
        #[source]
        source: Box<Error>,
    },

    // perturbation
    #[error("operator representations disagree (probe mismatch {mismatch:e})")]
    InconsistentRepresentations { mismatch: f64 },
    #[error("linearized operator L(K0, .) is not invertible")]
    OperatorSingular,
    #[error("(1,1) block of the first-order right-hand side is nonzero ({norm:e})")]
    R11NotZero { norm: f64 },

    // equilibrium analysis
    #[error("closed loop under the given gains is not asymptotically stable (abscissa {abscissa:e})")]
    UnstableClosedLoop { abscissa: f64 },
    #[error("best-response Riccati equation failed: {0}")]
    BestResponseAreFailure(String),
    #[error("finite-horizon Riccati solution escapes at t = {time}")]
    FiniteEscapeTime { time: f64 },

    // market problem
    #[error("zero cross-weight market problem is infeasible: {0}")]
    SeZeroInfeasible(String),
    #[error("market LQR problem is unsolvable: {0}")]
    MarketLqrUnsolvable(String),

    // simulation
    #[error("step {dt} too large for spectral radius {radius} (dt * radius must be <= 0.1)")]
    StepTooLarge { dt: f64, radius: f64 },
    #[error("state norm exceeded the overflow guard at t = {time}")]
    Divergence { time: f64 },
}
