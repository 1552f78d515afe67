//! The Riccati condition of the finite-M game and its Newton solver.
//!
//! With `[L1 L2] = −Bwᵀ K` substituted into the augmented drift, player 1's
//! value matrix must satisfy
//!
//! ```text
//! R(K, w) = K A(K, w) + A(K, w)ᵀ K + Q̃ − K Bw Bwᵀ K = 0
//! A(K, w) = A0 − E B0ᵀ K J + w (E B0ᵀ K − E Eᵀ K J) + w² E Eᵀ K
//! ```
//!
//! where `A0 = [[A1, A2], [0, A1+A2]]`, `E = [B2; B1+B2]`, `B0 = [B1; 0]`,
//! `Bw = B0 + w E` and `J = [[0, I], [0, I]]`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::game_model::{CouplingWeight, GameParams};
use crate::linalg::{
    eigenvalues, lu_solve, spectral_abscissa, sym, symmetric_operator_matrix, unvech, vech, Mat,
};
use crate::perturbation::SeriesTerm;
use crate::spectral_riccati::{stability_margin, NashValue};
use crate::tolerance::Tolerances;

#[derive(Debug, Clone)]
pub struct ResidualMatrix {
    pub r: Mat,
    /// Frobenius norm of `r`.
    pub norm: f64,
}

/// `A(K, w)`, grouped by powers of `w`.
pub fn drift(k: &NashValue, c: CouplingWeight, p: &GameParams) -> Mat {
    let w = c.w();
    let e = p.coupling_input();
    let b0 = p.player_input(0.0);
    let j = p.aggregate_selector();
    let kf = k.full();
    let eb0k = &e * b0.transpose() * kf;
    let eek = &e * e.transpose() * kf;
    p.base_drift() - &eb0k * &j + (&eb0k - &eek * &j) * w + eek * (w * w)
}

pub fn residual(k: &NashValue, c: CouplingWeight, p: &GameParams) -> ResidualMatrix {
    let kf = k.full();
    let a = drift(k, c, p);
    let bw = p.player_input(c.w());
    let r = kf * &a + a.transpose() * kf + p.augmented_cost() - kf * &bw * bw.transpose() * kf;
    let r = sym(&r);
    let norm = r.norm();
    ResidualMatrix { r, norm }
}

/// Closed loop of `(x_1, z)` when every player uses the gains of `K`:
/// `A(K, w) − Bw Bwᵀ K`.
pub fn closed_loop(k: &NashValue, c: CouplingWeight, p: &GameParams) -> Result<(Mat, Vec<Complex64>)> {
    let bw = p.player_input(c.w());
    let ac = drift(k, c, p) - &bw * bw.transpose() * k.full();
    let spectrum = eigenvalues(&ac)?;
    Ok((ac, spectrum))
}

/// Exact Fréchet derivative of `R(·, w)` at `K` in direction `X`:
/// `X Ac + Acᵀ X − K G X Jw − Jwᵀ X Gᵀ K`, with `G = E Bwᵀ`, `Jw = J − w I`.
pub fn frechet(k: &NashValue, c: CouplingWeight, p: &GameParams, x: &Mat) -> Mat {
    let bw = p.player_input(c.w());
    let kf = k.full();
    let ac = drift(k, c, p) - &bw * bw.transpose() * kf;
    let g = p.coupling_input() * bw.transpose();
    let d = kf.nrows();
    let jw = p.aggregate_selector() - Mat::identity(d, d) * c.w();
    let cross = kf * &g * x * &jw;
    x * &ac + ac.transpose() * x - &cross - cross.transpose()
}

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub tolerances: Tolerances,
    pub max_iter: usize,
    /// Step halvings tried before declaring a stall.
    pub max_backtrack: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            max_iter: 50,
            max_backtrack: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveCertificate {
    pub k: NashValue,
    pub w: CouplingWeight,
    pub iterations: usize,
    pub final_residual: f64,
    pub closed_loop_spectrum: Vec<Complex64>,
    /// Closed-loop spectral abscissa below `−τ_stab`.
    pub stable: bool,
}

fn newton_threshold(k: &NashValue, tol: &Tolerances) -> f64 {
    tol.newton_rel * (1.0 + k.full().norm())
}

/// Damped Newton iteration on `R(K, w) = 0` over symmetric `K`.
pub fn newton_solve(
    p: &GameParams,
    c: CouplingWeight,
    k_init: &NashValue,
    opts: &NewtonOptions,
) -> Result<SolveCertificate> {
    let d = 2 * p.n();
    let mut k = k_init.clone();
    let mut res = residual(&k, c, p);
    let mut iterations = 0;
    while res.norm > newton_threshold(&k, &opts.tolerances) {
        if iterations == opts.max_iter {
            return Err(Error::NoConvergence {
                residual: res.norm,
                iterations,
            });
        }
        let jac = symmetric_operator_matrix(d, |x| frechet(&k, c, p, x));
        let step = lu_solve(jac, &(-vech(&res.r)), "Riccati Jacobian")
            .map_err(|_| Error::SingularJacobian)?;
        let step = unvech(&step, d);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtrack {
            let cand = NashValue::from_full(k.full() + &step * alpha);
            let cand_res = residual(&cand, c, p);
            if cand_res.norm < res.norm {
                accepted = Some((cand, cand_res));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, next_res)) = accepted else {
            return Err(Error::NoConvergence {
                residual: res.norm,
                iterations,
            });
        };
        k = next;
        res = next_res;
        iterations += 1;
    }
    let (_, spectrum) = closed_loop(&k, c, p)?;
    let margin = stability_margin(p, &opts.tolerances);
    Ok(SolveCertificate {
        stable: spectral_abscissa(&spectrum) < -margin,
        k,
        w: c,
        iterations,
        final_residual: res.norm,
        closed_loop_spectrum: spectrum,
    })
}

/// `K0 + w K̄1`, the default Newton start.
pub fn first_order_guess(k0: &NashValue, kbar1: Option<&SeriesTerm>, w: f64) -> NashValue {
    match kbar1 {
        Some(t) => NashValue::from_full(k0.full() + &t.kbar * w),
        None => k0.clone(),
    }
}

/// Continuation results up to the first player count Newton could not reach.
#[derive(Debug, Clone)]
pub struct PartialSweep {
    pub certificates: Vec<SolveCertificate>,
    /// The first unreached player count and why; later counts are not tried.
    pub failure: Option<(usize, Error)>,
}

/// Like [`continuation_sweep`], but a Newton failure ends the sweep
/// instead of discarding it. Branches that fold before the smallest
/// requested M come back with their reachable prefix.
pub fn continuation_prefix(
    p: &GameParams,
    k0: &NashValue,
    kbar1: Option<&SeriesTerm>,
    players: &[usize],
    opts: &NewtonOptions,
) -> Result<PartialSweep> {
    if players.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidCoupling(
            "player counts must be strictly decreasing".to_string(),
        ));
    }
    let mut certificates: Vec<SolveCertificate> = Vec::with_capacity(players.len());
    for &m in players {
        let c = CouplingWeight::players(m)?;
        let init = match certificates.last() {
            Some(prev) => prev.k.clone(),
            None => first_order_guess(k0, kbar1, c.w()),
        };
        match newton_solve(p, c, &init, opts) {
            Ok(cert) => certificates.push(cert),
            Err(e) => {
                return Ok(PartialSweep {
                    certificates,
                    failure: Some((m, e)),
                })
            }
        }
    }
    Ok(PartialSweep {
        certificates,
        failure: None,
    })
}

/// Solves for each player count in `players` (largest first), starting from
/// `K0 + w K̄1` and warm-starting every later solve from the previous one.
pub fn continuation_sweep(
    p: &GameParams,
    k0: &NashValue,
    kbar1: Option<&SeriesTerm>,
    players: &[usize],
    opts: &NewtonOptions,
) -> Result<Vec<SolveCertificate>> {
    let partial = continuation_prefix(p, k0, kbar1, players, opts)?;
    match partial.failure {
        None => Ok(partial.certificates),
        Some((players, source)) => Err(Error::SweepFailed {
            players,
            source: Box::new(source),
        }),
    }
}
