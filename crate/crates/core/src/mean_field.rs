//! The infinite-population system and the inverse "market" problem.
//!
//! At `w = 0` the aggregate evolves by `Ac2` alone; a single player cannot
//! move it. The market problem asks for an LQR on the aggregate,
//!
//! ```text
//! dz/dt = (A1+A2) z + (B1+B2) u,   J = ½ ∫ zᵀ Qe z + 2 uᵀ Se z + uᵀ u dt,
//! ```
//!
//! whose optimal feedback `u = −((B1+B2)ᵀ P + Se) z` reproduces
//! `u = −B1ᵀ Y z`.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{block2, eigenvalues, match_spectra, solve_care, sym, Mat};
use crate::game_model::{FeedbackGains, GameParams};
use crate::spectral_riccati::{NashValue, YSolution};
use crate::tolerance::Tolerances;

/// `d/dt (x1, z) = [[A1 + own_gain, coupling], [0, aggregate_drift]] (x1, z)`.
#[derive(Debug, Clone)]
pub struct LimitSystem {
    pub own_drift: Mat,
    /// `−B1 B1ᵀ K1`.
    pub own_gain: Mat,
    /// `Ac2 = A1 + A2 − (B1+B2) B1ᵀ Y`.
    pub aggregate_drift: Mat,
    /// `A2 + B2 (L1 + L2) + B1 L2` at the limit gains.
    pub coupling: Mat,
    /// `L1 = −B1ᵀ K1`, `L2 = −B1ᵀ K`.
    pub gains: FeedbackGains,
}

impl LimitSystem {
    pub fn matrix(&self) -> Mat {
        let n = self.own_drift.nrows();
        block2(
            &(&self.own_drift + &self.own_gain),
            &self.coupling,
            &Mat::zeros(n, n),
            &self.aggregate_drift,
        )
    }
}

pub fn limit_dynamics(p: &GameParams, k0: &NashValue) -> LimitSystem {
    let b1t = p.b1().transpose();
    let l1 = -(&b1t * k0.k1());
    let l2 = -(&b1t * k0.k());
    LimitSystem {
        own_drift: p.a1().clone(),
        own_gain: p.b1() * &l1,
        aggregate_drift: k0.ac2(p),
        coupling: p.a2() + p.b2() * (&l1 + &l2) + p.b1() * &l2,
        gains: FeedbackGains { l1, l2 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarketChoice {
    /// `P = 0`, `Se = B1ᵀ Y`, `Qe = SeᵀSe`.
    Default,
    /// `Se = 0`, `P = Y`; needs `Y` symmetric and `B2ᵀ Y = 0`.
    ZeroCross,
}

#[derive(Debug, Clone)]
pub struct MarketProblem {
    pub qe: Mat,
    pub se: Mat,
    pub p: Mat,
    pub choice: MarketChoice,
}

impl MarketProblem {
    /// Smallest eigenvalue of `Qe − SeᵀSe`; the cost is convex iff it is
    /// nonnegative.
    pub fn feasibility_margin(&self) -> f64 {
        let reduced = sym(&(&self.qe - self.se.transpose() * &self.se));
        SymmetricEigen::new(reduced).eigenvalues.min()
    }
}

fn psd_floor(m: &Mat, tol: &Tolerances) -> f64 {
    tol.psd_rel * m.norm().max(1.0)
}

pub fn construct_market_problem(
    p: &GameParams,
    y: &YSolution,
    choice: MarketChoice,
    tol: &Tolerances,
) -> Result<MarketProblem> {
    let y = &y.y;
    match choice {
        MarketChoice::Default => {
            let se = p.b1().transpose() * y;
            Ok(MarketProblem {
                qe: se.transpose() * &se,
                se,
                p: Mat::zeros(p.n(), p.n()),
                choice,
            })
        }
        MarketChoice::ZeroCross => {
            let floor = psd_floor(y, tol);
            let asym = (y - y.transpose()).norm();
            if asym > floor {
                return Err(Error::SeZeroInfeasible(format!(
                    "Y is not symmetric (asymmetry {asym:e})"
                )));
            }
            let leak = (p.b2().transpose() * y).norm();
            if leak > floor {
                return Err(Error::SeZeroInfeasible(format!(
                    "B2ᵀ Y is nonzero ({leak:e}), so no P = Y reproduces the gain"
                )));
            }
            let ys = sym(y);
            let a = p.a_sum();
            let b = p.b_sum();
            let qe = sym(&(-(&ys * &a) - a.transpose() * &ys + &ys * &b * b.transpose() * &ys));
            let min_eig = SymmetricEigen::new(qe.clone()).eigenvalues.min();
            if min_eig < -psd_floor(&qe, tol) {
                return Err(Error::SeZeroInfeasible(format!(
                    "Qe has a negative eigenvalue {min_eig:e}"
                )));
            }
            Ok(MarketProblem {
                qe,
                se: Mat::zeros(p.m(), p.n()),
                p: ys,
                choice,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarketVerdict {
    pub feasible: bool,
    /// Stabilizing Riccati solution of the market problem.
    pub p_star: Mat,
    /// `(B1+B2)ᵀ P* + Se`.
    pub gain: Mat,
    pub gain_error: f64,
    pub closed_loop_spectrum: Vec<Complex64>,
    pub spectrum_distance: f64,
    pub holds: bool,
}

/// Solves the market LQR and checks that it reproduces the limit aggregate
/// feedback `B1ᵀ Y` and closed loop `Ac2`.
///
/// The cross term is removed by completing the square: drift
/// `(A1+A2) − (B1+B2) Se`, state weight `Qe − SeᵀSe`.
pub fn verify_inverse(p: &GameParams, mp: &MarketProblem, y: &YSolution, tol: &Tolerances) -> Result<MarketVerdict> {
    let b = p.b_sum();
    let drift = p.a_sum() - &b * &mp.se;
    let weight = sym(&(&mp.qe - mp.se.transpose() * &mp.se));
    let feasible = mp.feasibility_margin() >= -psd_floor(&mp.qe, tol);
    let sol = solve_care(&drift, &b, &weight, tol.cond, tol.stab_rel)
        .map_err(|e| Error::MarketLqrUnsolvable(e.to_string()))?;
    let gain = b.transpose() * &sol.p + &mp.se;
    let target = p.b1().transpose() * &y.y;
    let gain_error = (&gain - &target).norm();
    let closed = p.a_sum() - &b * &gain;
    let closed_loop_spectrum = eigenvalues(&closed)?;
    let spectrum_distance = match_spectra(&closed_loop_spectrum, &y.ac2_spectrum)
        .map(|(_, d)| d)
        .unwrap_or(f64::INFINITY);
    let holds = feasible
        && gain_error <= tol.res * (1.0 + target.norm())
        && spectrum_distance <= tol.eig;
    Ok(MarketVerdict {
        feasible,
        p_star: sol.p,
        gain,
        gain_error,
        closed_loop_spectrum,
        spectrum_distance,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled_solver::closed_loop;
    use crate::game_model::CouplingWeight;
    use crate::spectral_riccati::{limit_equilibria, EnumerationOptions};

    fn p1() -> (GameParams, Vec<crate::spectral_riccati::LimitBranch>) {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let (_, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        (p, b)
    }

    #[test]
    fn limit_system_is_the_limit_closed_loop() {
        let (p, b) = p1();
        let k0 = b[0].k0.as_ref().unwrap();
        let ls = limit_dynamics(&p, k0);
        let y = (-1.0 + 13f64.sqrt()) / 2.0;
        assert!((ls.aggregate_drift[(0, 0)] + y).abs() < 1e-12);
        let (ac, _) = closed_loop(k0, CouplingWeight::limit(), &p).unwrap();
        assert!((ls.matrix() - ac).norm() < 1e-13);
        assert_eq!(ls.matrix()[(1, 0)], 0.0);
    }

    #[test]
    fn decoupled_limit_system() {
        let p = GameParams::scalar(0.5, 0.0, 0.0, 2.0).unwrap();
        let (k1, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        let ls = limit_dynamics(&p, b[0].k0.as_ref().unwrap());
        assert!((&ls.aggregate_drift - &k1.ac1).norm() < 1e-12);
        // z does not enter x1 when A2 = B2 = 0 and K = 0
        assert!(ls.coupling.norm() < 1e-12);
    }

    #[test]
    fn default_market_reproduces_the_aggregate() {
        let (p, b) = p1();
        let tol = Tolerances::default();
        let mp = construct_market_problem(&p, &b[0].y, MarketChoice::Default, &tol).unwrap();
        let y = (-1.0 + 13f64.sqrt()) / 2.0;
        assert!((mp.se[(0, 0)] - y).abs() < 1e-12);
        assert!((mp.qe[(0, 0)] - y * y).abs() < 1e-12);
        assert_eq!(mp.feasibility_margin(), 0.0);
        let v = verify_inverse(&p, &mp, &b[0].y, &tol).unwrap();
        assert!(v.holds);
        assert!(v.p_star.norm() < 1e-12);
        assert!((v.gain[(0, 0)] - y).abs() < 1e-12);
    }

    #[test]
    fn corrupted_cross_weight_fails() {
        let (p, b) = p1();
        let tol = Tolerances::default();
        let mut mp = construct_market_problem(&p, &b[0].y, MarketChoice::Default, &tol).unwrap();
        mp.se[(0, 0)] += 0.1;
        let v = verify_inverse(&p, &mp, &b[0].y, &tol).unwrap();
        assert!(!v.feasible && !v.holds);
    }

    #[test]
    fn zero_cross_weight_on_the_scalar_fixture() {
        let (p, b) = p1();
        let tol = Tolerances::default();
        let mp = construct_market_problem(&p, &b[0].y, MarketChoice::ZeroCross, &tol).unwrap();
        let y = b[0].y.y[(0, 0)];
        // Qe = Q − A2ᵀ Y, which equals y² here
        assert!((mp.qe[(0, 0)] - (3.0 - y)).abs() < 1e-12);
        assert!((mp.qe[(0, 0)] - y * y).abs() < 1e-12);
        assert!(verify_inverse(&p, &mp, &b[0].y, &tol).unwrap().holds);
    }

    #[test]
    fn zero_cross_weight_needs_decoupled_input() {
        let p = GameParams::scalar(-1.0, 1.0, 0.5, 3.0).unwrap();
        let tol = Tolerances::default();
        let (_, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        assert!(matches!(
            construct_market_problem(&p, &b[0].y, MarketChoice::ZeroCross, &tol),
            Err(Error::SeZeroInfeasible(_))
        ));
    }

    #[test]
    fn zero_cross_weight_can_be_indefinite() {
        // y = 1.5, Qe = q − a y = −0.75
        let p = GameParams::scalar(0.0, 1.0, 0.0, 0.75).unwrap();
        let tol = Tolerances::default();
        let (_, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        assert!((b[0].y.y[(0, 0)] - 1.5).abs() < 1e-12);
        assert!(matches!(
            construct_market_problem(&p, &b[0].y, MarketChoice::ZeroCross, &tol),
            Err(Error::SeZeroInfeasible(_))
        ));
    }

    #[test]
    fn trivial_market() {
        let p = GameParams::scalar(-1.0, 0.0, 0.0, 0.0).unwrap();
        let tol = Tolerances::default();
        let (_, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        assert!(b[0].y.y.norm() < 1e-14);
        let mp = construct_market_problem(&p, &b[0].y, MarketChoice::Default, &tol).unwrap();
        assert!(mp.qe.norm() < 1e-14 && mp.se.norm() < 1e-14 && mp.p.norm() == 0.0);
    }

    /// The market closed loop is always stable, so the scalar aggregate
    /// pole `λ2` is reproduced exactly when `λ2 < 0`.
    #[test]
    fn scalar_market_locus() {
        let tol = Tolerances::default();
        for &(a1, a, b, q) in &[(-1.0, 1.0, 0.0, 3.0), (1.0, -4.0, 0.0, 1.0), (0.3, 0.8, 1.5, 2.0)] {
            let p = GameParams::scalar(a1, a, b, q).unwrap();
            let (_, branches) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
            for br in &branches {
                let lambda2 = br.y.ac2_spectrum[0].re;
                let mp = construct_market_problem(&p, &br.y, MarketChoice::Default, &tol).unwrap();
                let v = verify_inverse(&p, &mp, &br.y, &tol).unwrap();
                assert_eq!(v.holds, lambda2 < 0.0, "game {:?} y {}", (a1, a, b, q), br.y.y[(0, 0)]);
                // closed loop pole of the market LQR is −|drift| ≤ 0
                assert!(v.closed_loop_spectrum[0].re < 0.0);
            }
        }
    }
}
