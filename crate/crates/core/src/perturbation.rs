//! First-order expansion `K(w) = K0 + w K̄1 + O(w²)` around the limit game.
//!
//! The derivative of `R(·, 0)` at `K0`, written `L(K0, X)`, is block lower
//! triangular in `X = [[χ1, χ], [χᵀ, χ2]]`:
//!
//! ```text
//! L11 = χ1 Ac1 + Ac1ᵀ χ1
//! L12 = χ1 Ac0 + χ Ac2 + Ac1ᵀ χ − P1 (χ1 + χ)
//! L22 = χᵀ Ac0 + Ac0ᵀ χ + χ2 Ac2 + Ac2ᵀ χ2 − P2 (χ1 + χ) − (P2 (χ1 + χ))ᵀ
//! ```
//!
//! with `P1 = (K1 B2 + K (B1+B2)) B1ᵀ` and `P2 = (Kᵀ B2 + K2 (B1+B2)) B1ᵀ`.
//! The diagonal of `L12` in `χ` is `χ Ac2 + (A1ᵀ − Y (B1+B2) B1ᵀ) χ`, so the
//! three diagonal operators are two Lyapunov maps and one Sylvester map.
//! `K̄1` solves `L(K0, K̄1) = −∂R/∂w(K0, 0) = K0 E Eᵀ K0 J + Jᵀ K0 E Eᵀ K0`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coupled_solver::frechet;
use crate::error::{Error, Result};
use crate::game_model::{CouplingWeight, GameParams};
use crate::linalg::{
    block2, eigenvalues, lu_solve, solve_lyapunov, solve_sylvester, sym, symmetric_operator_matrix,
    unvech, vech, Mat, Vector,
};
use crate::spectral_riccati::{stability_margin, NashValue};
use crate::tolerance::Tolerances;

const PROBE_SEED: u64 = 0x005e_ed0f_0e7a;
const PROBES: usize = 4;

/// `L(K0, ·)` in both its direct and block-triangular forms.
#[derive(Debug, Clone)]
pub struct OperatorL {
    k0: NashValue,
    p: GameParams,
    ac1: Mat,
    ac2: Mat,
    ac0: Mat,
    /// `A1ᵀ − Y (B1+B2) B1ᵀ`.
    mirror: Mat,
    p1: Mat,
    p2: Mat,
}

impl OperatorL {
    fn new(k0: &NashValue, p: &GameParams) -> Self {
        let (k1, k, k2) = (k0.k1(), k0.k(), k0.k2());
        let b1t = p.b1().transpose();
        let p1 = (&k1 * p.b2() + &k * p.b_sum()) * &b1t;
        let p2 = (k.transpose() * p.b2() + &k2 * p.b_sum()) * &b1t;
        Self {
            ac1: k0.ac1(p),
            ac2: k0.ac2(p),
            ac0: k0.ac0(p),
            mirror: p.a1().transpose() - k0.y() * p.s_mix(),
            p1,
            p2,
            k0: k0.clone(),
            p: p.clone(),
        }
    }

    pub fn k0(&self) -> &NashValue {
        &self.k0
    }

    pub fn ac1(&self) -> &Mat {
        &self.ac1
    }

    pub fn ac2(&self) -> &Mat {
        &self.ac2
    }

    pub fn mirror(&self) -> &Mat {
        &self.mirror
    }

    fn split(&self, x: &Mat) -> (Mat, Mat, Mat) {
        let n = self.k0.n();
        (
            x.view((0, 0), (n, n)).into_owned(),
            x.view((0, n), (n, n)).into_owned(),
            x.view((n, n), (n, n)).into_owned(),
        )
    }

    /// Derivative of the residual at `w = 0`, evaluated directly.
    pub fn apply(&self, x: &Mat) -> Mat {
        sym(&frechet(&self.k0, CouplingWeight::limit(), &self.p, x))
    }

    /// The same map through its block formulas.
    pub fn apply_blocks(&self, x: &Mat) -> Mat {
        let (x1, xc, x2) = self.split(x);
        let s = &x1 + &xc;
        let l11 = &x1 * &self.ac1 + self.ac1.transpose() * &x1;
        let l12 = &x1 * &self.ac0 + &xc * &self.ac2 + self.ac1.transpose() * &xc - &self.p1 * &s;
        let p2s = &self.p2 * &s;
        let l22 = xc.transpose() * &self.ac0 + self.ac0.transpose() * &xc + &x2 * &self.ac2
            + self.ac2.transpose() * &x2
            - &p2s
            - p2s.transpose();
        block2(&l11, &l12, &l12.transpose(), &l22)
    }

    /// Solves `L(K0, X) = r` by forward substitution over the three blocks.
    pub fn solve(&self, r: &Mat) -> Result<Mat> {
        let (r11, r12, r22) = self.split(r);
        let x1 = solve_lyapunov(&self.ac1, &(-r11)).map_err(|_| Error::OperatorSingular)?;
        let rhs12 = r12 - &x1 * &self.ac0 + &self.p1 * &x1;
        let xc = solve_sylvester(&self.mirror, &self.ac2, &rhs12).map_err(|_| Error::OperatorSingular)?;
        let s = &x1 + &xc;
        let p2s = &self.p2 * &s;
        let lower = xc.transpose() * &self.ac0 + self.ac0.transpose() * &xc - &p2s - p2s.transpose();
        let x2 = solve_lyapunov(&self.ac2, &(lower - r22)).map_err(|_| Error::OperatorSingular)?;
        Ok(block2(&x1, &xc, &xc.transpose(), &x2))
    }

    /// Matrix of the operator in symmetric (`vech`) coordinates.
    pub fn dense_matrix(&self) -> Mat {
        symmetric_operator_matrix(2 * self.k0.n(), |x| self.apply(x))
    }

    /// Solves `L(K0, X) = r` through the dense vectorized system.
    pub fn solve_dense(&self, r: &Mat) -> Result<Mat> {
        let x = lu_solve(self.dense_matrix(), &vech(r), "linearized Riccati operator")
            .map_err(|_| Error::OperatorSingular)?;
        Ok(unvech(&x, 2 * self.k0.n()))
    }
}

fn random_symmetric(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let raw = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    sym(&raw)
}

/// Builds `L(K0, ·)` and checks that both representations agree on random
/// symmetric probes.
pub fn build_operator(k0: &NashValue, p: &GameParams, tol: &Tolerances) -> Result<OperatorL> {
    let op = OperatorL::new(k0, p);
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    for _ in 0..PROBES {
        let x = random_symmetric(&mut rng, 2 * k0.n());
        let direct = op.apply(&x);
        let mismatch = (&direct - op.apply_blocks(&x)).norm();
        if mismatch > tol.res * (1.0 + direct.norm()) {
            return Err(Error::InconsistentRepresentations { mismatch });
        }
    }
    Ok(op)
}

/// Eigenvalue sums of the three diagonal operators of `L(K0, ·)`.
#[derive(Debug, Clone)]
pub struct InvertibilityVerdict {
    /// `λi(Ac1) + λj(Ac1)`.
    pub own_sums: Vec<Complex64>,
    /// `λi(Ac2) + λj(A1ᵀ − Y (B1+B2) B1ᵀ)`.
    pub cross_sums: Vec<Complex64>,
    /// `λi(Ac2) + λj(Ac2)`.
    pub aggregate_sums: Vec<Complex64>,
    pub invertible: bool,
    /// Every sum has real part below `−τ_stab`.
    pub stable_nash: bool,
}

fn pair_sums(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x + y)).collect()
}

/// Verdict from the three spectra directly.
pub fn verdict_from_spectra(
    ac1: &[Complex64],
    ac2: &[Complex64],
    mirror: &[Complex64],
    tol: &Tolerances,
    margin: f64,
) -> InvertibilityVerdict {
    let own_sums = pair_sums(ac1, ac1);
    let cross_sums = pair_sums(ac2, mirror);
    let aggregate_sums = pair_sums(ac2, ac2);
    let scale = ac1
        .iter()
        .chain(ac2)
        .chain(mirror)
        .map(|z| z.norm())
        .fold(1.0, f64::max);
    let all = || own_sums.iter().chain(&cross_sums).chain(&aggregate_sums);
    InvertibilityVerdict {
        invertible: all().all(|z| z.norm() > tol.eig * scale),
        stable_nash: all().all(|z| z.re < -margin),
        own_sums,
        cross_sums,
        aggregate_sums,
    }
}

pub fn invertibility_check(op: &OperatorL, tol: &Tolerances) -> Result<InvertibilityVerdict> {
    Ok(verdict_from_spectra(
        &eigenvalues(&op.ac1)?,
        &eigenvalues(&op.ac2)?,
        &eigenvalues(&op.mirror)?,
        tol,
        stability_margin(&op.p, tol),
    ))
}

/// `−∂R/∂w` at `(K0, 0)`: `K0 E Eᵀ K0 J + Jᵀ K0 E Eᵀ K0`.
pub fn first_order_rhs(k0: &NashValue, p: &GameParams) -> Mat {
    let e = p.coupling_input();
    let kf = k0.full();
    let t = kf * &e * e.transpose() * kf * p.aggregate_selector();
    &t + t.transpose()
}

/// A coefficient `K̄_order` of the expansion of `K(w)`.
#[derive(Debug, Clone)]
pub struct SeriesTerm {
    pub order: usize,
    pub kbar: Mat,
    /// Norm of the (1,1) block of the right-hand side it was solved from.
    pub r11_norm: f64,
}

impl SeriesTerm {
    fn block(&self, r: usize, c: usize) -> Mat {
        let n = self.kbar.nrows() / 2;
        self.kbar.view((r * n, c * n), (n, n)).into_owned()
    }

    pub fn k11(&self) -> Mat {
        self.block(0, 0)
    }

    pub fn k12(&self) -> Mat {
        self.block(0, 1)
    }

    pub fn k22(&self) -> Mat {
        self.block(1, 1)
    }
}

/// Solves for `K̄1`. The (1,1) block of the right-hand side vanishes
/// identically, hence so does that of `K̄1`; both are checked and the block
/// is then set to exactly zero.
pub fn first_order_term(k0: &NashValue, p: &GameParams, tol: &Tolerances) -> Result<SeriesTerm> {
    let op = build_operator(k0, p, tol)?;
    if !invertibility_check(&op, tol)?.invertible {
        return Err(Error::OperatorSingular);
    }
    let n = p.n();
    let r = first_order_rhs(k0, p);
    let r11_norm = r.view((0, 0), (n, n)).norm();
    if r11_norm > tol.res * (1.0 + r.norm()) {
        return Err(Error::R11NotZero { norm: r11_norm });
    }
    let mut kbar = op.solve(&r)?;
    let k11_norm = kbar.view((0, 0), (n, n)).norm();
    if k11_norm > tol.res * (1.0 + kbar.norm()) {
        return Err(Error::R11NotZero { norm: k11_norm });
    }
    kbar.view_mut((0, 0), (n, n)).fill(0.0);
    Ok(SeriesTerm {
        order: 1,
        kbar,
        r11_norm,
    })
}

/// First-order estimate of what a player gains by deviating from the
/// limit strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonBound {
    pub players: usize,
    /// `½ w vᵢᵀ K̄1 vᵢ` with `vᵢ = (xᵢ(0), z(0))`, one entry per player.
    pub per_player: Vec<f64>,
    /// Player 1's entry.
    pub value: f64,
}

/// Stacks `(x, z)`.
pub fn stack_state(x: &Vector, z: &Vector) -> Vector {
    let mut v = Vector::zeros(x.len() + z.len());
    v.rows_mut(0, x.len()).copy_from(x);
    v.rows_mut(x.len(), z.len()).copy_from(z);
    v
}

/// Mean of the initial states.
pub fn average_state(x0_all: &[Vector]) -> Vector {
    let n = x0_all[0].len();
    x0_all.iter().fold(Vector::zeros(n), |acc, x| acc + x) / x0_all.len() as f64
}

pub(crate) fn check_initial_states(x0_all: &[Vector], players: usize, n: usize) -> Result<()> {
    if x0_all.len() != players {
        return Err(Error::DimensionMismatch {
            what: "initial states",
            expected: format!("{players} players"),
            found: format!("{} players", x0_all.len()),
        });
    }
    if let Some(bad) = x0_all.iter().find(|x| x.len() != n) {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: format!("{n} entries"),
            found: format!("{} entries", bad.len()),
        });
    }
    Ok(())
}

pub fn epsilon_bound(kbar1: &SeriesTerm, c: CouplingWeight, x0_all: &[Vector]) -> Result<EpsilonBound> {
    let players = c.player_count().ok_or_else(|| {
        Error::InvalidCoupling("an epsilon bound needs a finite player count".to_string())
    })?;
    check_initial_states(x0_all, players, kbar1.kbar.nrows() / 2)?;
    let z0 = average_state(x0_all);
    let per_player: Vec<f64> = x0_all
        .iter()
        .map(|x| {
            let v = stack_state(x, &z0);
            0.5 * c.w() * v.dot(&(&kbar1.kbar * &v))
        })
        .collect();
    Ok(EpsilonBound {
        players,
        value: per_player[0],
        per_player,
    })
}

/// `½ vᵀ (K0 + w K̄1) v` with `v = (x1(0), z(0))`.
pub fn first_order_cost(k0: &NashValue, kbar1: &SeriesTerm, w: f64, x1_0: &Vector, z0: &Vector) -> f64 {
    let v = stack_state(x1_0, z0);
    let k = k0.full() + &kbar1.kbar * w;
    0.5 * v.dot(&(k * &v))
}
