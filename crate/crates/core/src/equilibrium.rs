//! Nash certificates, branch classification and the finite-horizon Riccati
//! flow at `w = 0`.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;

use crate::coupled_solver::closed_loop;
use crate::error::{Error, Result};
use crate::game_model::{augmented_dynamics, CouplingWeight, FeedbackGains, GameParams};
use crate::linalg::{eigenvalues, solve_care, solve_lyapunov, spectral_abscissa, Mat, Vector};
use crate::perturbation::{
    average_state, check_initial_states, stack_state, verdict_from_spectra, EpsilonBound,
};
use crate::spectral_riccati::{stability_margin, ClassicalSolution, LimitBranch, NashValue};
use crate::tolerance::Tolerances;

#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    pub branch: usize,
    pub ac1_abscissa: f64,
    pub ac2_abscissa: f64,
    /// Both `Ac1` and `Ac2` asymptotically stable.
    pub stabilizing: bool,
    /// `L(K0, ·)` nonsingular.
    pub invertible: bool,
    pub stable_nash: bool,
    /// Spectrum of the limit closed loop `[[Ac1, Ac0], [0, Ac2]]`.
    pub closed_loop_spectrum: Vec<Complex64>,
    pub own_sums: Vec<Complex64>,
    pub cross_sums: Vec<Complex64>,
    pub aggregate_sums: Vec<Complex64>,
    pub epsilon: Option<EpsilonBound>,
}

/// Classifies one branch of the limit game. Works for non-stabilizing
/// branches too, where no `K0` exists.
pub fn classify(
    p: &GameParams,
    k1: &ClassicalSolution,
    branch: &LimitBranch,
    epsilon: Option<EpsilonBound>,
    tol: &Tolerances,
) -> Result<EquilibriumReport> {
    let margin = stability_margin(p, tol);
    let y = &branch.y;
    let op_spectrum = eigenvalues(&y.mirror_operator(p))?;
    let verdict = verdict_from_spectra(&k1.spectrum, &y.ac2_spectrum, &op_spectrum, tol, margin);
    let ac1_abscissa = spectral_abscissa(&k1.spectrum);
    let ac2_abscissa = spectral_abscissa(&y.ac2_spectrum);
    let stabilizing = ac1_abscissa < -margin && ac2_abscissa < -margin;
    let closed_loop_spectrum = match &branch.k0 {
        Some(k0) => closed_loop(k0, CouplingWeight::limit(), p)?.1,
        None => k1.spectrum.iter().chain(&y.ac2_spectrum).copied().collect(),
    };
    Ok(EquilibriumReport {
        branch: branch.index,
        ac1_abscissa,
        ac2_abscissa,
        stabilizing,
        invertible: verdict.invertible,
        stable_nash: stabilizing && verdict.stable_nash,
        closed_loop_spectrum,
        own_sums: verdict.own_sums,
        cross_sums: verdict.cross_sums,
        aggregate_sums: verdict.aggregate_sums,
        epsilon,
    })
}

/// How much each player could save by deviating unilaterally.
#[derive(Debug, Clone)]
pub struct BestResponseGap {
    /// `J_i(gains) − J_i(best response)`.
    pub per_player: Vec<f64>,
    /// `J_i` when everybody uses the gains.
    pub cost: Vec<f64>,
    /// Optimal cost of player `i` against the others' gains.
    pub best_cost: Vec<f64>,
}

impl BestResponseGap {
    pub fn max(&self) -> f64 {
        self.per_player.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Exact infinite-horizon best-response gap for every player.
///
/// Player `i`'s problem against opponents on `gains` is an LQR on
/// `(x_i, z)`; its optimal value comes from the Riccati equation and the
/// value under `gains` from the closed-loop Lyapunov equation.
pub fn best_response_gap(
    p: &GameParams,
    c: CouplingWeight,
    gains: &FeedbackGains,
    x0_all: &[Vector],
    tol: &Tolerances,
) -> Result<BestResponseGap> {
    let players = c.player_count().ok_or_else(|| {
        Error::InvalidCoupling("a best-response gap needs a finite player count".to_string())
    })?;
    check_initial_states(x0_all, players, p.n())?;
    let sys = augmented_dynamics(p, gains, c);
    let l = gains.stacked();
    let acl = &sys.a + &sys.b * &l;
    let abscissa = spectral_abscissa(&eigenvalues(&acl)?);
    if abscissa >= -stability_margin(p, tol) {
        return Err(Error::UnstableClosedLoop { abscissa });
    }
    let weight = p.augmented_cost() + l.transpose() * &l;
    let value = solve_lyapunov(&acl, &weight)
        .map_err(|_| Error::UnstableClosedLoop { abscissa })?;
    let best = solve_care(&sys.a, &sys.b, &p.augmented_cost(), tol.cond, tol.stab_rel)
        .map_err(|e| Error::BestResponseAreFailure(e.to_string()))?;
    let z0 = average_state(x0_all);
    let mut out = BestResponseGap {
        per_player: Vec::with_capacity(players),
        cost: Vec::with_capacity(players),
        best_cost: Vec::with_capacity(players),
    };
    for x in x0_all {
        let v = stack_state(x, &z0);
        let j = 0.5 * v.dot(&(&value * &v));
        let jb = 0.5 * v.dot(&(&best.p * &v));
        out.per_player.push(j - jb);
        out.cost.push(j);
        out.best_cost.push(jb);
    }
    Ok(out)
}

/// Terminal weight, horizon and integration grid of the finite-horizon game.
#[derive(Debug, Clone)]
pub struct FiniteHorizonSpec {
    qf: Mat,
    tf: f64,
    steps: usize,
}

impl FiniteHorizonSpec {
    pub const DEFAULT_STEPS: usize = 4000;

    pub fn new(qf: Mat, tf: f64, steps: usize) -> Result<Self> {
        if !(tf > 0.0 && tf.is_finite()) || steps == 0 {
            return Err(Error::InvalidCoupling(format!(
                "horizon must be positive with at least one step, got tf = {tf}, steps = {steps}"
            )));
        }
        if !qf.is_square() {
            return Err(Error::DimensionMismatch {
                what: "terminal weight",
                expected: "square".to_string(),
                found: format!("{}x{}", qf.nrows(), qf.ncols()),
            });
        }
        let min_eig = SymmetricEigen::new(qf.clone()).eigenvalues.min();
        let scale = qf.norm().max(1.0);
        if (&qf - qf.transpose()).norm() > 1e-10 * scale || min_eig < -1e-10 * scale {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self { qf, tf, steps })
    }

    pub fn with_default_grid(qf: Mat, tf: f64) -> Result<Self> {
        Self::new(qf, tf, Self::DEFAULT_STEPS)
    }

    pub fn qf(&self) -> &Mat {
        &self.qf
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.tf / self.steps as f64
    }
}

/// Samples of `K1(t)`, `Y(t)`, `K2(t)` from `t = tf` down to `t = 0`.
#[derive(Debug, Clone)]
pub struct FiniteHorizonPath {
    pub times: Vec<f64>,
    pub k1: Vec<Mat>,
    pub y: Vec<Mat>,
    pub k2: Vec<Mat>,
}

impl FiniteHorizonPath {
    /// Value matrix at sample `i`.
    pub fn value(&self, i: usize) -> NashValue {
        NashValue::from_blocks(self.k1[i].clone(), &self.y[i] - &self.k1[i], self.k2[i].clone())
    }

    /// Value matrix at `t = 0`.
    pub fn initial_value(&self) -> NashValue {
        self.value(self.times.len() - 1)
    }
}

const ESCAPE_NORM: f64 = 1e12;

type Flow = (Mat, Mat, Mat);

/// Right-hand side in reversed time `s = tf − t`.
fn backward_rhs(p: &GameParams, (k1, y, k2): &Flow) -> Flow {
    let bb = p.b1() * p.b1().transpose();
    let a1t = p.a1().transpose();
    let dk1 = k1 * p.a1() + &a1t * k1 + p.q() - k1 * &bb * k1;
    let dy = y * p.a_sum() + &a1t * y - y * p.s_mix() * y + p.q();
    let k = y - k1;
    let ac1 = p.a1() - &bb * k1;
    let ac2 = p.a_sum() - p.s_mix() * y;
    let ac0 = &ac2 - &ac1;
    let kt = k.transpose();
    let dk2 = k2 * &ac2 + ac2.transpose() * k2 + &kt * &ac0 + ac0.transpose() * &k + &kt * &bb * &k;
    (dk1, dy, dk2)
}

fn axpy(x: &Flow, h: f64, d: &Flow) -> Flow {
    (&x.0 + &d.0 * h, &x.1 + &d.1 * h, &x.2 + &d.2 * h)
}

/// Integrates the three limit Riccati equations backward from
/// `K1(tf) = Y(tf) = Qf`, `K2(tf) = 0` with classical RK4.
pub fn finite_horizon_path(p: &GameParams, spec: &FiniteHorizonSpec) -> Result<FiniteHorizonPath> {
    let n = p.n();
    if spec.qf.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "terminal weight",
            expected: format!("{n}x{n}"),
            found: format!("{}x{}", spec.qf.nrows(), spec.qf.ncols()),
        });
    }
    let h = spec.dt();
    let mut state: Flow = (spec.qf.clone(), spec.qf.clone(), Mat::zeros(n, n));
    let mut path = FiniteHorizonPath {
        times: Vec::with_capacity(spec.steps + 1),
        k1: Vec::with_capacity(spec.steps + 1),
        y: Vec::with_capacity(spec.steps + 1),
        k2: Vec::with_capacity(spec.steps + 1),
    };
    let push = |path: &mut FiniteHorizonPath, t: f64, s: &Flow| {
        path.times.push(t);
        path.k1.push(s.0.clone());
        path.y.push(s.1.clone());
        path.k2.push(s.2.clone());
    };
    push(&mut path, spec.tf, &state);
    for i in 1..=spec.steps {
        let d1 = backward_rhs(p, &state);
        let d2 = backward_rhs(p, &axpy(&state, 0.5 * h, &d1));
        let d3 = backward_rhs(p, &axpy(&state, 0.5 * h, &d2));
        let d4 = backward_rhs(p, &axpy(&state, h, &d3));
        state = (
            &state.0 + (&d1.0 + &d2.0 * 2.0 + &d3.0 * 2.0 + &d4.0) * (h / 6.0),
            &state.1 + (&d1.1 + &d2.1 * 2.0 + &d3.1 * 2.0 + &d4.1) * (h / 6.0),
            &state.2 + (&d1.2 + &d2.2 * 2.0 + &d3.2 * 2.0 + &d4.2) * (h / 6.0),
        );
        let t = if i == spec.steps {
            0.0
        } else {
            spec.tf - i as f64 * h
        };
        let size = state.0.norm() + state.1.norm() + state.2.norm();
        if !size.is_finite() || size > ESCAPE_NORM {
            return Err(Error::FiniteEscapeTime { time: t });
        }
        push(&mut path, t, &state);
    }
    Ok(path)
}

/// Largest entrywise distance between the path at `t = 0` and `K0`.
pub fn path_distance(path: &FiniteHorizonPath, k0: &NashValue) -> f64 {
    (path.initial_value().full() - k0.full()).amax()
}

/// True iff `(K1, Y, K2)` at `t = 0` match the blocks of `K0` within `tol`.
pub fn convergence_check(path: &FiniteHorizonPath, k0: &NashValue, tol: f64) -> bool {
    path_distance(path, k0) <= tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game_model::extract_gains;
    use crate::spectral_riccati::{limit_equilibria, EnumerationOptions};

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn scalar_state(v: f64, count: usize) -> Vec<Vector> {
        vec![Vector::from_element(1, v); count]
    }

    #[test]
    fn scalar_fixture_is_stable_nash() {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let tol = Tolerances::default();
        let (k1, branches) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        let r = classify(&p, &k1, &branches[0], None, &tol).unwrap();
        assert!(r.stabilizing && r.invertible && r.stable_nash);
        let r = classify(&p, &k1, &branches[1], None, &tol).unwrap();
        assert!(!r.stabilizing && !r.stable_nash);
    }

    #[test]
    fn second_branch_is_not_stable_nash() {
        let p = GameParams::scalar(1.0, -4.0, 0.0, 1.0).unwrap();
        let tol = Tolerances::default();
        let (k1, branches) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        assert_eq!(branches.len(), 2);
        let reports: Vec<_> = branches
            .iter()
            .map(|b| classify(&p, &k1, b, None, &tol).unwrap())
            .collect();
        let neg = branches.iter().position(|b| b.y.y[(0, 0)] < 0.0).unwrap();
        let pos = 1 - neg;
        assert!(reports[pos].stabilizing && reports[pos].invertible && reports[pos].stable_nash);
        assert!(reports[neg].stabilizing && reports[neg].invertible && !reports[neg].stable_nash);
        assert!((reports[neg].cross_sums[0].re - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unstable_zero_cost_branch() {
        let p = GameParams::scalar(0.5, 0.0, 0.0, 0.0).unwrap();
        let tol = Tolerances::default();
        let (k1, branches) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        let zero = branches.iter().find(|b| b.y.y[(0, 0)].abs() < 1e-12).unwrap();
        let r = classify(&p, &k1, zero, None, &tol).unwrap();
        assert!(!r.stabilizing && !r.stable_nash);
    }

    #[test]
    fn decoupled_gap_vanishes() {
        let p = GameParams::scalar(0.5, 0.0, 0.0, 2.0).unwrap();
        let (k1, _) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        let gains = FeedbackGains {
            l1: -(p.b1().transpose() * &k1.k1),
            l2: s(0.0),
        };
        let x0 = vec![s(1.0).column(0).into_owned(), s(-2.0).column(0).into_owned(), s(0.5).column(0).into_owned()];
        let gap = best_response_gap(&p, CouplingWeight::players(3).unwrap(), &gains, &x0, &Tolerances::default())
            .unwrap();
        assert!(gap.per_player.iter().all(|g| g.abs() <= 1e-10 * 6.25));
    }

    #[test]
    fn exchangeable_players_have_equal_gaps() {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let (_, branches) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        let k0 = branches[0].k0.clone().unwrap();
        let c = CouplingWeight::players(5).unwrap();
        let gains = extract_gains(&k0, &p, c);
        let gap = best_response_gap(&p, c, &gains, &scalar_state(1.0, 5), &Tolerances::default()).unwrap();
        assert!(gap.per_player.iter().all(|g| (g - gap.per_player[0]).abs() < 1e-12));
        assert!(gap.per_player[0] >= 0.0);
    }

    #[test]
    fn unstable_gains_are_rejected() {
        let p = GameParams::scalar(0.5, 0.0, 0.0, 1.0).unwrap();
        let gains = FeedbackGains::zero(&p);
        let c = CouplingWeight::players(2).unwrap();
        let err = best_response_gap(&p, c, &gains, &scalar_state(1.0, 2), &Tolerances::default());
        assert!(matches!(err, Err(Error::UnstableClosedLoop { .. })));
    }

    #[test]
    fn own_block_reaches_the_stationary_root() {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let spec = FiniteHorizonSpec::with_default_grid(s(0.0), 20.0).unwrap();
        let path = finite_horizon_path(&p, &spec).unwrap();
        assert_eq!(path.times[0], 20.0);
        assert_eq!(*path.times.last().unwrap(), 0.0);
        assert_eq!(path.y[0], s(0.0));
        assert!((path.k1.last().unwrap()[(0, 0)] - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn escape_is_reported() {
        // y' = y^2 + 1 in reversed time blows up near s = π/2
        let p = GameParams::scalar(0.0, 0.0, -2.0, 1.0).unwrap();
        let spec = FiniteHorizonSpec::new(s(0.0), 5.0, 5000).unwrap();
        match finite_horizon_path(&p, &spec) {
            Err(Error::FiniteEscapeTime { time }) => assert!((5.0 - time - std::f64::consts::FRAC_PI_2).abs() < 0.05),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(FiniteHorizonSpec::new(s(-1.0), 1.0, 10).is_err());
        assert!(FiniteHorizonSpec::new(s(1.0), 0.0, 10).is_err());
        assert!(FiniteHorizonSpec::new(s(1.0), 1.0, 0).is_err());
    }
}
