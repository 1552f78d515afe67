//! The infinite-population (w = 0) equations.
//!
//! At `w = 0` the 2n×2n Riccati condition decouples into
//!
//! ```text
//! 0 = K1 A1 + A1ᵀ K1 + Q − K1 B1 B1ᵀ K1                       (own block)
//! 0 = Y (A1+A2) + A1ᵀ Y − Y (B1+B2) B1ᵀ Y + Q,   K = Y − K1    (aggregate, nonsymmetric)
//! 0 = K2 Ac2 + Ac2ᵀ K2 + Kᵀ Ac0 + Ac0ᵀ K + Kᵀ B1 B1ᵀ K         (linear in K2)
//! ```
//!
//! The nonsymmetric equation for `Y` is solved through the invariant
//! subspaces of `H = [[A1+A2, −(B1+B2)B1ᵀ], [−Q, −A1ᵀ]]`: each conjugation-
//! closed choice of n eigenvalues whose Schur basis `[U; V]` has a
//! well-conditioned `U` yields the branch `Y = V U⁻¹`. Several branches can be
//! stabilizing at once; all of them are reported.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::game_model::GameParams;
use crate::linalg::{
    block2, condition_number, eigenvalues, match_spectra, solve_care, solve_lyapunov,
    solve_sylvester, sort_spectrum, spectral_abscissa, spectral_norm, sym, Mat, RealSchur,
};
use crate::tolerance::Tolerances;

/// Symmetric 2n×2n value matrix `[[K1, K], [Kᵀ, K2]]` of player 1 in the
/// coordinates `(x_1, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NashValue {
    full: Mat,
    n: usize,
}

impl NashValue {
    pub fn from_blocks(k1: Mat, k: Mat, k2: Mat) -> Self {
        let full = block2(&k1, &k, &k.transpose(), &k2);
        Self::from_full(full)
    }

    /// Wraps a 2n×2n matrix, symmetrizing it.
    pub fn from_full(full: Mat) -> Self {
        assert!(full.is_square() && full.nrows().is_multiple_of(2), "value matrix must be 2n x 2n");
        let n = full.nrows() / 2;
        Self {
            full: sym(&full),
            n,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            full: Mat::zeros(2 * n, 2 * n),
            n,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn full(&self) -> &Mat {
        &self.full
    }

    pub fn k1(&self) -> Mat {
        self.full.view((0, 0), (self.n, self.n)).into_owned()
    }

    /// Cross block `K` (upper right).
    pub fn k(&self) -> Mat {
        self.full.view((0, self.n), (self.n, self.n)).into_owned()
    }

    pub fn k2(&self) -> Mat {
        self.full.view((self.n, self.n), (self.n, self.n)).into_owned()
    }

    /// `Y = K1 + K`.
    pub fn y(&self) -> Mat {
        self.k1() + self.k()
    }

    /// `Ac1 = A1 − B1 B1ᵀ K1`.
    pub fn ac1(&self, p: &GameParams) -> Mat {
        p.a1() - p.b1() * p.b1().transpose() * self.k1()
    }

    /// `Ac2 = A1 + A2 − (B1+B2) B1ᵀ (K1 + K)`.
    pub fn ac2(&self, p: &GameParams) -> Mat {
        p.a_sum() - p.s_mix() * self.y()
    }

    /// `Ac0 = Ac2 − Ac1`.
    pub fn ac0(&self, p: &GameParams) -> Mat {
        self.ac2(p) - self.ac1(p)
    }
}

/// Stabilizing solution of the own-state Riccati equation.
#[derive(Debug, Clone)]
pub struct ClassicalSolution {
    pub k1: Mat,
    pub ac1: Mat,
    pub spectrum: Vec<Complex64>,
    pub residual: f64,
}

pub fn classical_residual(p: &GameParams, k1: &Mat) -> Mat {
    k1 * p.a1() + p.a1().transpose() * k1 + p.q() - k1 * p.b1() * p.b1().transpose() * k1
}

pub fn solve_classical_are(p: &GameParams, tol: &Tolerances) -> Result<ClassicalSolution> {
    let sol = solve_care(p.a1(), p.b1(), p.q(), tol.cond, tol.stab_rel).map_err(|e| match e {
        Error::NoStabilizingSolution(msg) => Error::NoStabilizingSolution(msg),
        other => Error::NoStabilizingSolution(other.to_string()),
    })?;
    let bound = tol.res * (1.0 + sol.p.norm().powi(2));
    if sol.residual > bound {
        return Err(Error::NoStabilizingSolution(format!(
            "residual {:e} above certificate bound {bound:e}",
            sol.residual
        )));
    }
    Ok(ClassicalSolution {
        k1: sol.p,
        ac1: sol.closed_loop,
        spectrum: sol.spectrum,
        residual: sol.residual,
    })
}

/// `H = [[A1+A2, −(B1+B2)B1ᵀ], [−Q, −A1ᵀ]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPencil {
    h: Mat,
}

impl HamiltonianPencil {
    pub fn h(&self) -> &Mat {
        &self.h
    }

    pub fn norm(&self) -> f64 {
        spectral_norm(&self.h)
    }

    pub fn spectrum(&self) -> Result<Vec<Complex64>> {
        eigenvalues(&self.h)
    }
}

pub fn build_hamiltonian(p: &GameParams) -> HamiltonianPencil {
    HamiltonianPencil {
        h: block2(&p.a_sum(), &(-p.s_mix()), &(-p.q()), &(-p.a1().transpose())),
    }
}

/// Which eigenvalues of `H` a branch was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSelector {
    /// The n selected eigenvalues (closed under conjugation), sorted.
    pub eigenvalues: Vec<Complex64>,
    /// Root sign for scalar games: `+1` for the root whose linearized
    /// aggregate flow is stable, `-1` for the other, `None` at a double root
    /// or when `n > 1`.
    pub sign: Option<i8>,
}

/// One solution branch of the aggregate Riccati equation.
#[derive(Debug, Clone)]
pub struct YSolution {
    pub y: Mat,
    pub branch: BranchSelector,
    /// `A1 + A2 − (B1+B2) B1ᵀ Y`.
    pub ac2: Mat,
    pub ac2_spectrum: Vec<Complex64>,
    /// Spectrum of `−(A1ᵀ − Y (B1+B2) B1ᵀ)`; together with `ac2_spectrum`
    /// it makes up the spectrum of `H`.
    pub mirror_spectrum: Vec<Complex64>,
    pub stabilizing: bool,
    pub stable_nash: bool,
    pub residual: f64,
}

impl YSolution {
    /// `A1ᵀ − Y (B1+B2) B1ᵀ`, the left factor of the linearized equation.
    pub fn mirror_operator(&self, p: &GameParams) -> Mat {
        p.a1().transpose() - &self.y * p.s_mix()
    }

    /// `max Re λ(Ac2) + max Re λ(A1ᵀ − Y(B1+B2)B1ᵀ)`: negative iff the
    /// linearized Riccati flow at `Y` is asymptotically stable.
    pub fn linearized_abscissa(&self) -> f64 {
        spectral_abscissa(&self.ac2_spectrum) + operator_abscissa(&self.mirror_spectrum)
    }

    /// Wraps a given `Y` after checking its residual certificate. The
    /// selected eigenvalues are taken to be the spectrum of `Ac2`.
    pub fn certify(p: &GameParams, y: Mat, tol: &Tolerances) -> Result<Self> {
        let residual = y_residual(p, &y).norm();
        let bound = tol.res * (1.0 + y.norm().powi(2));
        if residual > bound {
            return Err(Error::ResidualTooLarge { residual, bound });
        }
        let selected = eigenvalues(&(p.a_sum() - p.s_mix() * &y))?;
        Self::build(p, y, selected, stability_margin(p, tol))
    }

    fn build(p: &GameParams, y: Mat, selected: Vec<Complex64>, margin: f64) -> Result<Self> {
        let ac2 = p.a_sum() - p.s_mix() * &y;
        let ac2_spectrum = eigenvalues(&ac2)?;
        let mirror_op = p.a1().transpose() - &y * p.s_mix();
        let mirror_spectrum = eigenvalues(&(-&mirror_op))?;
        let residual = y_residual(p, &y).norm();
        let ac2_abs = spectral_abscissa(&ac2_spectrum);
        let op_abs = operator_abscissa(&mirror_spectrum);
        let stabilizing = ac2_abs < -margin;
        let stable_nash = stabilizing && ac2_abs + op_abs < -margin;
        let sign = if p.n() == 1 {
            let sum = ac2_spectrum[0].re + (-mirror_spectrum[0].re);
            if sum.abs() <= margin {
                None
            } else if sum < 0.0 {
                Some(1)
            } else {
                Some(-1)
            }
        } else {
            None
        };
        let mut eigs = selected;
        sort_spectrum(&mut eigs);
        Ok(Self {
            y,
            branch: BranchSelector {
                eigenvalues: eigs,
                sign,
            },
            ac2,
            ac2_spectrum,
            mirror_spectrum,
            stabilizing,
            stable_nash,
            residual,
        })
    }
}

/// Abscissa of `A1ᵀ − Y(B1+B2)B1ᵀ` from the (negated) mirror spectrum.
fn operator_abscissa(mirror: &[Complex64]) -> f64 {
    -mirror.iter().map(|z| z.re).fold(f64::INFINITY, f64::min)
}

/// `Y (A1+A2) + A1ᵀ Y − Y (B1+B2) B1ᵀ Y + Q`.
pub fn y_residual(p: &GameParams, y: &Mat) -> Mat {
    y * p.a_sum() + p.a1().transpose() * y - y * p.s_mix() * y + p.q()
}

/// Stability margin `τ_stab` for this game.
pub fn stability_margin(p: &GameParams, tol: &Tolerances) -> f64 {
    tol.stab(build_hamiltonian(p).norm())
}

#[derive(Debug, Clone)]
pub struct EnumerationOptions {
    pub tolerances: Tolerances,
    /// Largest n for which all C(2n, n) subsets are tried.
    pub branch_cap: usize,
    /// Fail instead of falling back to the single primary subset when
    /// `n > branch_cap`.
    pub exhaustive: bool,
}

impl Default for EnumerationOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            branch_cap: 8,
            exhaustive: false,
        }
    }
}

fn block_subsets(sizes: &[usize], target: usize) -> Vec<Vec<bool>> {
    fn rec(sizes: &[usize], idx: usize, left: usize, cur: &mut Vec<bool>, out: &mut Vec<Vec<bool>>) {
        if left == 0 {
            let mut sel = cur.clone();
            sel.resize(sizes.len(), false);
            out.push(sel);
            return;
        }
        if idx == sizes.len() {
            return;
        }
        if sizes[idx] <= left {
            cur.push(true);
            rec(sizes, idx + 1, left - sizes[idx], cur, out);
            cur.pop();
        }
        cur.push(false);
        rec(sizes, idx + 1, left, cur, out);
        cur.pop();
    }
    let mut out = Vec::new();
    rec(sizes, 0, target, &mut Vec::new(), &mut out);
    out
}

fn same_multiset(a: &[Complex64], b: &[Complex64]) -> bool {
    match match_spectra(a, b) {
        Some((_, d)) => d <= 1e-9,
        None => false,
    }
}

/// Newton polishing of a nonsymmetric Riccati solution; keeps only steps
/// that lower the residual.
fn refine_y(p: &GameParams, mut y: Mat) -> Mat {
    let mut res = y_residual(p, &y);
    for _ in 0..4 {
        let left = p.a1().transpose() - &y * p.s_mix();
        let right = p.a_sum() - p.s_mix() * &y;
        let Ok(delta) = solve_sylvester(&left, &right, &(-&res)) else {
            break;
        };
        let cand = &y + delta;
        let cand_res = y_residual(p, &cand);
        if cand_res.norm() < res.norm() {
            y = cand;
            res = cand_res;
        } else {
            break;
        }
    }
    y
}

/// Every certified branch of the aggregate Riccati equation, stabilizing
/// branches first, then by spectral abscissa of `Ac2`.
pub fn enumerate_y_solutions(p: &GameParams, opts: &EnumerationOptions) -> Result<Vec<YSolution>> {
    let n = p.n();
    let tol = &opts.tolerances;
    if opts.exhaustive && n > opts.branch_cap {
        return Err(Error::BranchCapExceeded {
            n,
            cap: opts.branch_cap,
        });
    }
    let ham = build_hamiltonian(p);
    let margin = tol.stab(ham.norm());
    let schur = RealSchur::new(ham.h())?;
    let blocks = schur.blocks().to_vec();
    let sizes: Vec<usize> = blocks.iter().map(|b| b.size).collect();
    let block_eigs: Vec<Vec<Complex64>> = blocks.iter().map(|b| schur.block_eigenvalues(*b)).collect();

    let candidates = if n <= opts.branch_cap {
        block_subsets(&sizes, n)
    } else {
        // primary subset: the n eigenvalues of smallest real part
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.sort_by(|&a, &b| block_eigs[a][0].re.total_cmp(&block_eigs[b][0].re));
        let mut sel = vec![false; blocks.len()];
        let mut left = n;
        for i in order {
            if sizes[i] <= left {
                sel[i] = true;
                left -= sizes[i];
            }
            if left == 0 {
                break;
            }
        }
        if left == 0 {
            vec![sel]
        } else {
            Vec::new()
        }
    };

    let mut seen: Vec<Vec<Complex64>> = Vec::new();
    let mut out = Vec::new();
    let mut attempted = 0usize;
    for sel in candidates {
        let mut chosen: Vec<Complex64> = sel
            .iter()
            .zip(&block_eigs)
            .filter(|(s, _)| **s)
            .flat_map(|(_, e)| e.iter().copied())
            .collect();
        sort_spectrum(&mut chosen);
        if seen.iter().any(|s| same_multiset(s, &chosen)) {
            continue;
        }
        seen.push(chosen.clone());
        attempted += 1;

        let mut local = schur.clone();
        if local.reorder(&sel).is_err() {
            continue;
        }
        let basis = local.leading_subspace(n);
        let u = basis.rows(0, n).into_owned();
        let v = basis.rows(n, n).into_owned();
        if condition_number(&u) > tol.cond {
            continue;
        }
        let Some(u_inv) = u.try_inverse() else {
            continue;
        };
        let y = refine_y(p, v * u_inv);
        let bound = tol.res * (1.0 + y.norm().powi(2));
        if y_residual(p, &y).norm() > bound {
            continue;
        }
        out.push(YSolution::build(p, y, chosen, margin)?);
    }
    if out.is_empty() && attempted > 0 {
        return Err(Error::SubspaceDegenerate);
    }
    out.sort_by(|a, b| {
        b.stabilizing
            .cmp(&a.stabilizing)
            .then(
                spectral_abscissa(&a.ac2_spectrum).total_cmp(&spectral_abscissa(&b.ac2_spectrum)),
            )
            .then_with(|| {
                let key = |s: &YSolution| {
                    s.branch
                        .eigenvalues
                        .iter()
                        .map(|z| (z.re, z.im))
                        .collect::<Vec<_>>()
                };
                key(a)
                    .partial_cmp(&key(b))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    Ok(out)
}

/// Pairing of `spectrum(H)` with `spectrum(Ac2) ∪ spectrum(−(A1ᵀ − Y(B1+B2)B1ᵀ))`.
#[derive(Debug, Clone)]
pub struct SpectrumSplit {
    /// `(eigenvalue of H, matched eigenvalue of the split)`.
    pub pairs: Vec<(Complex64, Complex64)>,
    pub distance: f64,
}

/// Confirms that `[[I, 0], [−Y, I]] H [[I, 0], [Y, I]]` is block upper
/// triangular by comparing spectra.
pub fn verify_similarity(
    h: &HamiltonianPencil,
    p: &GameParams,
    y: &YSolution,
    tol: &Tolerances,
) -> Result<SpectrumSplit> {
    let h_spec = h.spectrum()?;
    let ac2 = p.a_sum() - p.s_mix() * &y.y;
    let mirror = -(p.a1().transpose() - &y.y * p.s_mix());
    let mut split = eigenvalues(&ac2)?;
    split.extend(eigenvalues(&mirror)?);
    let (pairs, distance) = match_spectra(&h_spec, &split).ok_or(Error::SpectrumMismatch {
        distance: f64::INFINITY,
        tolerance: tol.eig,
    })?;
    if distance > tol.eig {
        return Err(Error::SpectrumMismatch {
            distance,
            tolerance: tol.eig,
        });
    }
    Ok(SpectrumSplit {
        pairs: pairs.into_iter().map(|(i, j)| (h_spec[i], split[j])).collect(),
        distance,
    })
}

pub fn k2_residual(p: &GameParams, k1: &Mat, y: &Mat, k2: &Mat) -> Mat {
    let k = y - k1;
    let ac1 = p.a1() - p.b1() * p.b1().transpose() * k1;
    let ac2 = p.a_sum() - p.s_mix() * y;
    let ac0 = &ac2 - &ac1;
    let kt = k.transpose();
    k2 * &ac2 + ac2.transpose() * k2 + &kt * &ac0 + ac0.transpose() * &k
        + &kt * p.b1() * p.b1().transpose() * &k
}

/// Solves the linear equation for the aggregate block
/// `0 = K2 Ac2 + Ac2ᵀ K2 + Kᵀ Ac0 + Ac0ᵀ K + Kᵀ B1 B1ᵀ K`, `K = Y − K1`.
pub fn solve_k2(p: &GameParams, k1: &ClassicalSolution, y: &YSolution, tol: &Tolerances) -> Result<Mat> {
    let margin = stability_margin(p, tol);
    let abscissa = spectral_abscissa(&y.ac2_spectrum);
    if abscissa >= -margin {
        return Err(Error::UnstableAc2 { abscissa });
    }
    let k = &y.y - &k1.k1;
    let ac0 = &y.ac2 - &k1.ac1;
    let kt = k.transpose();
    let forcing = &kt * &ac0 + ac0.transpose() * &k + &kt * p.b1() * p.b1().transpose() * &k;
    let k2 = solve_lyapunov(&y.ac2, &forcing).map_err(|_| Error::UnstableAc2 { abscissa })?;
    let res = k2_residual(p, &k1.k1, &y.y, &k2).norm();
    let bound = tol.res * (1.0 + k2.norm().powi(2) + k.norm().powi(2));
    if res > bound {
        return Err(Error::UnstableAc2 { abscissa });
    }
    Ok(k2)
}

/// `K0 = [[K1, Y − K1], [(Y − K1)ᵀ, K2]]`.
pub fn assemble_k0(k1: &Mat, y: &Mat, k2: &Mat, tol: &Tolerances) -> Result<NashValue> {
    let k = y - k1;
    let raw = block2(k1, &k, &k.transpose(), k2);
    let value = NashValue::from_full(raw.clone());
    let mismatch = (value.full() - &raw).norm();
    if mismatch > tol.res * (1.0 + raw.norm()) {
        return Err(Error::AsymmetryTooLarge { mismatch });
    }
    Ok(value)
}

/// A branch of the limit game together with its value matrix when the
/// branch is stabilizing.
#[derive(Debug, Clone)]
pub struct LimitBranch {
    pub index: usize,
    pub y: YSolution,
    pub k0: Option<NashValue>,
}

/// Solves all w = 0 equations: the own-state Riccati, every aggregate
/// branch and, for stabilizing branches, the aggregate block.
pub fn limit_equilibria(
    p: &GameParams,
    opts: &EnumerationOptions,
) -> Result<(ClassicalSolution, Vec<LimitBranch>)> {
    let tol = &opts.tolerances;
    let classical = solve_classical_are(p, tol)?;
    let branches = enumerate_y_solutions(p, opts)?
        .into_iter()
        .enumerate()
        .map(|(index, y)| {
            let k0 = if y.stabilizing {
                solve_k2(p, &classical, &y, tol)
                    .and_then(|k2| assemble_k0(&classical.k1, &y.y, &k2, tol))
                    .ok()
            } else {
                None
            };
            LimitBranch { index, y, k0 }
        })
        .collect();
    Ok((classical, branches))
}
