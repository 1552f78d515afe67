//! Symmetric many-player linear-quadratic feedback Nash games.
//!
//! The crate computes exact equilibria at a finite number of players `M`, the
//! infinite-population limit and its first-order correction in `w = 1/M`,
//! ε-Nash certificates, stability classification, the inverse market problem
//! and closed-loop simulations.

pub mod coupled_solver;
pub mod equilibrium;
pub mod error;
pub mod game_model;
pub mod linalg;
pub mod mean_field;
pub mod perturbation;
pub mod simulator;
pub mod spectral_riccati;
pub mod tolerance;

pub use coupled_solver::{
    closed_loop, continuation_prefix, continuation_sweep, newton_solve, residual, NewtonOptions,
    PartialSweep, ResidualMatrix, SolveCertificate,
};
pub use equilibrium::{
    best_response_gap, classify, convergence_check, finite_horizon_path, EquilibriumReport,
    FiniteHorizonPath, FiniteHorizonSpec,
};
pub use error::{Error, Result};
pub use game_model::{
    augmented_dynamics, extract_gains, validate_game, AugmentedSystem, CouplingWeight,
    FeedbackGains, GameParams, RawGame,
};
pub use mean_field::{
    construct_market_problem, limit_dynamics, verify_inverse, LimitSystem, MarketChoice,
    MarketProblem,
};
pub use perturbation::{
    build_operator, epsilon_bound, first_order_cost, first_order_term, invertibility_check,
    EpsilonBound, OperatorL, SeriesTerm,
};
pub use simulator::{
    evaluate_cost, simulate_finite_horizon, simulate_full, simulate_limit, simulate_reduced,
    TimeGrid, Trajectory,
};
pub use spectral_riccati::{
    build_hamiltonian, enumerate_y_solutions, limit_equilibria, solve_classical_are, solve_k2,
    verify_similarity, EnumerationOptions, HamiltonianPencil, NashValue, YSolution,
};
pub use tolerance::Tolerances;
