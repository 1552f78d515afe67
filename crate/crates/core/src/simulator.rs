//! Fixed-step RK4 simulation of the full game, the `(x1, z)` reduction, the
//! limit system and the finite-horizon equilibrium, with running costs.
//!
//! Costs use Simpson's rule per step, with the midpoint state taken from
//! the cubic Hermite interpolant of the step, so they are fourth-order
//! accurate like the states.

use crate::equilibrium::{FiniteHorizonPath, FiniteHorizonSpec};
use crate::error::{Error, Result};
use crate::game_model::{augmented_dynamics, CouplingWeight, FeedbackGains, GameParams};
use crate::linalg::{eigenvalues, spectral_radius, Mat, Vector};
use crate::mean_field::LimitSystem;
use crate::perturbation::check_initial_states;

/// States beyond this norm are treated as divergence.
pub const OVERFLOW_GUARD: f64 = 1e12;
/// Largest accepted `dt · ρ(closed loop)`.
pub const STEP_SAFETY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
    stride: usize,
}

impl TimeGrid {
    /// `steps = round(t_end / dt)`; the step is then `t_end / steps`.
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > 0.0 && dt > 0.0 && t_end.is_finite() && dt.is_finite()) {
            return Err(Error::InvalidCoupling(format!(
                "simulation needs positive horizon and step, got T = {t_end}, dt = {dt}"
            )));
        }
        Ok(Self {
            t_end,
            steps: ((t_end / dt).round() as usize).max(1),
            stride: 1,
        })
    }

    /// Records every `stride`-th step (the last step is always recorded).
    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Full,
    Reduced,
    Limit,
    FiniteHorizon,
}

/// Sampled states, controls and running costs.
///
/// `states[k][a]` is agent `a` at `times[k]`; agents are the players in
/// full mode and `(x1, z)` otherwise. The first `players` agents incur
/// costs.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub labels: Vec<String>,
    pub players: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<Vector>>,
    pub controls: Vec<Vec<Vector>>,
    pub costs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["time".to_string()];
        for (a, label) in self.labels.iter().enumerate() {
            for k in 0..self.states[0][a].len() {
                h.push(format!("{label}_{}", k + 1));
            }
        }
        for i in 0..self.players {
            for k in 0..self.controls[0][i].len() {
                h.push(format!("u{}_{}", i + 1, k + 1));
            }
        }
        for i in 0..self.players {
            h.push(format!("J{}", i + 1));
        }
        h
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        let mut r = vec![self.times[k]];
        r.extend(self.states[k].iter().flat_map(|x| x.iter().copied()));
        r.extend(self.controls[k].iter().flat_map(|u| u.iter().copied()));
        r.extend(self.costs[k].iter().copied());
        r
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self, agent: usize) -> &Vector {
        &self.states[self.len() - 1][agent]
    }

    pub fn final_costs(&self) -> &[f64] {
        &self.costs[self.len() - 1]
    }
}

/// A closed loop seen by the integrator. Time enters through the half-step
/// index `k`, i.e. `t = k · dt / 2`.
trait Plant {
    fn rhs(&self, k: usize, x: &Vector) -> Vector;
    /// Per-agent states of the stacked vector.
    fn agents(&self, x: &Vector) -> Vec<Vector>;
    /// Per-player controls.
    fn controls(&self, k: usize, x: &Vector) -> Vec<Vector>;
    fn q(&self) -> &Mat;
}

fn running_rates<P: Plant>(plant: &P, k: usize, x: &Vector, players: usize) -> Vec<f64> {
    let agents = plant.agents(x);
    plant
        .controls(k, x)
        .iter()
        .take(players)
        .zip(&agents)
        .map(|(u, xi)| 0.5 * (xi.dot(&(plant.q() * xi)) + u.dot(u)))
        .collect()
}

fn check_step(dt: f64, radius: f64) -> Result<()> {
    if dt * radius > STEP_SAFETY {
        return Err(Error::StepTooLarge { dt, radius });
    }
    Ok(())
}

fn integrate<P: Plant>(
    plant: &P,
    x0: Vector,
    grid: TimeGrid,
    kind: TrajectoryKind,
    labels: Vec<String>,
    players: usize,
) -> Result<Trajectory> {
    let h = grid.dt();
    let mut traj = Trajectory {
        kind,
        labels,
        players,
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        costs: Vec::new(),
    };
    let record = |traj: &mut Trajectory, step: usize, x: &Vector, cost: &[f64]| {
        traj.times.push(if step == grid.steps { grid.t_end } else { step as f64 * h });
        traj.states.push(plant.agents(x));
        traj.controls.push(plant.controls(2 * step, x));
        traj.costs.push(cost.to_vec());
    };
    let mut x = x0;
    let mut cost = vec![0.0; players];
    record(&mut traj, 0, &x, &cost);
    let mut f0 = plant.rhs(0, &x);
    for step in 0..grid.steps {
        let k = 2 * step;
        let k1 = &f0;
        let k2 = plant.rhs(k + 1, &(&x + k1 * (0.5 * h)));
        let k3 = plant.rhs(k + 1, &(&x + &k2 * (0.5 * h)));
        let k4 = plant.rhs(k + 2, &(&x + &k3 * h));
        let next = &x + (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        let t = (step + 1) as f64 * h;
        let size = next.norm();
        if !size.is_finite() || size > OVERFLOW_GUARD {
            return Err(Error::Divergence { time: t });
        }
        let f1 = plant.rhs(k + 2, &next);
        let mid = (&x + &next) * 0.5 + (&f0 - &f1) * (h / 8.0);
        let c0 = running_rates(plant, k, &x, players);
        let cm = running_rates(plant, k + 1, &mid, players);
        let c1 = running_rates(plant, k + 2, &next, players);
        for i in 0..players {
            cost[i] += h / 6.0 * (c0[i] + 4.0 * cm[i] + c1[i]);
        }
        x = next;
        f0 = f1;
        if (step + 1) % grid.stride == 0 || step + 1 == grid.steps {
            record(&mut traj, step + 1, &x, &cost);
        }
    }
    Ok(traj)
}

fn split_agents(x: &Vector, n: usize) -> Vec<Vector> {
    (0..x.len() / n).map(|a| x.rows(a * n, n).into_owned()).collect()
}

struct FullPlant<'a> {
    p: &'a GameParams,
    g: &'a FeedbackGains,
    players: usize,
}

impl FullPlant<'_> {
    fn inputs(&self, agents: &[Vector]) -> (Vector, Vec<Vector>) {
        let z = agents.iter().fold(Vector::zeros(self.p.n()), |acc, x| acc + x) / self.players as f64;
        let lz = &self.g.l2 * &z;
        let u = agents.iter().map(|x| &self.g.l1 * x + &lz).collect();
        (z, u)
    }
}

impl Plant for FullPlant<'_> {
    fn rhs(&self, _k: usize, x: &Vector) -> Vector {
        let agents = self.agents(x);
        let (z, u) = self.inputs(&agents);
        let ubar = u.iter().fold(Vector::zeros(self.p.m()), |acc, v| acc + v) / self.players as f64;
        let common = self.p.a2() * &z + self.p.b2() * ubar;
        let n = self.p.n();
        let mut out = Vector::zeros(x.len());
        for (i, (xi, ui)) in agents.iter().zip(&u).enumerate() {
            out.rows_mut(i * n, n)
                .copy_from(&(self.p.a1() * xi + self.p.b1() * ui + &common));
        }
        out
    }

    fn agents(&self, x: &Vector) -> Vec<Vector> {
        split_agents(x, self.p.n())
    }

    fn controls(&self, _k: usize, x: &Vector) -> Vec<Vector> {
        self.inputs(&self.agents(x)).1
    }

    fn q(&self) -> &Mat {
        self.p.q()
    }
}

/// Player 1 on `(x1, z)` under a constant or sampled gain schedule.
struct ReducedPlant<'a> {
    p: &'a GameParams,
    /// Closed loop and stacked gain per half step; one entry when constant.
    schedule: Vec<(Mat, Mat)>,
}

impl ReducedPlant<'_> {
    fn at(&self, k: usize) -> &(Mat, Mat) {
        &self.schedule[k.min(self.schedule.len() - 1)]
    }
}

impl Plant for ReducedPlant<'_> {
    fn rhs(&self, k: usize, x: &Vector) -> Vector {
        &self.at(k).0 * x
    }

    fn agents(&self, x: &Vector) -> Vec<Vector> {
        split_agents(x, self.p.n())
    }

    fn controls(&self, k: usize, x: &Vector) -> Vec<Vector> {
        vec![&self.at(k).1 * x]
    }

    fn q(&self) -> &Mat {
        self.p.q()
    }
}

fn stack(x1_0: &Vector, z0: &Vector) -> Vector {
    crate::perturbation::stack_state(x1_0, z0)
}

fn reduced_labels() -> Vec<String> {
    vec!["x1".to_string(), "z".to_string()]
}

fn check_pair(p: &GameParams, x1_0: &Vector, z0: &Vector) -> Result<()> {
    check_initial_states(std::slice::from_ref(x1_0), 1, p.n())?;
    check_initial_states(std::slice::from_ref(z0), 1, p.n())
}

/// All `M` players using `u_i = L1 x_i + L2 z`.
pub fn simulate_full(
    p: &GameParams,
    c: CouplingWeight,
    g: &FeedbackGains,
    x0_all: &[Vector],
    grid: TimeGrid,
) -> Result<Trajectory> {
    let players = c
        .player_count()
        .ok_or_else(|| Error::InvalidCoupling("full simulation needs a player count".to_string()))?;
    check_initial_states(x0_all, players, p.n())?;
    // differences evolve by A1 + B1 L1, the mean by A1 + A2 + (B1+B2)(L1+L2)
    let diff = p.a1() + p.b1() * &g.l1;
    let mean = p.a_sum() + p.b_sum() * (&g.l1 + &g.l2);
    let radius = spectral_radius(&eigenvalues(&diff)?).max(spectral_radius(&eigenvalues(&mean)?));
    check_step(grid.dt(), radius)?;
    let mut x0 = Vector::zeros(players * p.n());
    for (i, xi) in x0_all.iter().enumerate() {
        x0.rows_mut(i * p.n(), p.n()).copy_from(xi);
    }
    let labels = (1..=players).map(|i| format!("x{i}")).collect();
    let plant = FullPlant { p, g, players };
    integrate(&plant, x0, grid, TrajectoryKind::Full, labels, players)
}

/// Player 1's `(x1, z)` system when everybody, player 1 included, uses `g`.
pub fn simulate_reduced(
    p: &GameParams,
    c: CouplingWeight,
    g: &FeedbackGains,
    x1_0: &Vector,
    z0: &Vector,
    grid: TimeGrid,
) -> Result<Trajectory> {
    check_pair(p, x1_0, z0)?;
    let sys = augmented_dynamics(p, g, c);
    let gain = g.stacked();
    let acl = &sys.a + &sys.b * &gain;
    check_step(grid.dt(), spectral_radius(&eigenvalues(&acl)?))?;
    let plant = ReducedPlant {
        p,
        schedule: vec![(acl, gain)],
    };
    integrate(&plant, stack(x1_0, z0), grid, TrajectoryKind::Reduced, reduced_labels(), 1)
}

/// The infinite-population system.
pub fn simulate_limit(
    p: &GameParams,
    ls: &LimitSystem,
    x1_0: &Vector,
    z0: &Vector,
    grid: TimeGrid,
) -> Result<Trajectory> {
    check_pair(p, x1_0, z0)?;
    let a = ls.matrix();
    check_step(grid.dt(), spectral_radius(&eigenvalues(&a)?))?;
    let plant = ReducedPlant {
        p,
        schedule: vec![(a, ls.gains.stacked())],
    };
    integrate(&plant, stack(x1_0, z0), grid, TrajectoryKind::Limit, reduced_labels(), 1)
}

/// Equilibrium play of the finite-horizon limit game with the time-varying
/// gains `−B1ᵀ [K1(t) K(t)]` of `path`. The RK4 step is two path samples,
/// so every stage uses a stored sample.
pub fn simulate_finite_horizon(
    p: &GameParams,
    path: &FiniteHorizonPath,
    x1_0: &Vector,
    z0: &Vector,
) -> Result<Trajectory> {
    check_pair(p, x1_0, z0)?;
    let samples = path.times.len();
    if samples < 3 || !(samples - 1).is_multiple_of(2) {
        return Err(Error::InvalidCoupling(
            "finite-horizon path needs an even number of steps".to_string(),
        ));
    }
    let tf = path.times[0];
    let b1t = p.b1().transpose();
    let b0 = p.player_input(0.0);
    let mut schedule = Vec::with_capacity(samples);
    let mut radius: f64 = 0.0;
    // path runs from tf down to 0; the schedule runs forward in time
    for i in (0..samples).rev() {
        let value = path.value(i);
        let stacked = -(&b1t * value.full().rows(0, p.n()));
        let g = FeedbackGains {
            l1: stacked.columns(0, p.n()).into_owned(),
            l2: stacked.columns(p.n(), p.n()).into_owned(),
        };
        let sys = augmented_dynamics(p, &g, CouplingWeight::limit());
        let acl = sys.a + &b0 * &stacked;
        radius = radius.max(spectral_radius(&eigenvalues(&acl)?));
        schedule.push((acl, stacked));
    }
    let grid = TimeGrid {
        t_end: tf,
        steps: (samples - 1) / 2,
        stride: 1,
    };
    check_step(grid.dt(), radius)?;
    let plant = ReducedPlant { p, schedule };
    integrate(&plant, stack(x1_0, z0), grid, TrajectoryKind::FiniteHorizon, reduced_labels(), 1)
}

/// Accumulated cost of every player, plus `½ xᵢ(T)ᵀ Qf xᵢ(T)` when a
/// finite-horizon spec is given.
pub fn evaluate_cost(traj: &Trajectory, spec: Option<&FiniteHorizonSpec>) -> Vec<f64> {
    traj.final_costs()
        .iter()
        .enumerate()
        .map(|(i, j)| match spec {
            Some(s) => {
                let x = traj.final_state(i);
                j + 0.5 * x.dot(&(s.qf() * x))
            }
            None => *j,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupled_solver::{newton_solve, NewtonOptions};
    use crate::equilibrium::finite_horizon_path;
    use crate::game_model::extract_gains;
    use crate::mean_field::limit_dynamics;
    use crate::spectral_riccati::{limit_equilibria, EnumerationOptions, NashValue};

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn p1_k0() -> (GameParams, NashValue) {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let (_, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        (p, b[0].k0.clone().unwrap())
    }

    #[test]
    fn decoupled_players_follow_their_lqr_value() {
        let p = GameParams::scalar(0.5, 0.0, 0.0, 2.0).unwrap();
        let (k1, b) = limit_equilibria(&p, &EnumerationOptions::default()).unwrap();
        let c = CouplingWeight::players(2).unwrap();
        let g = extract_gains(b[0].k0.as_ref().unwrap(), &p, c);
        let traj = simulate_full(&p, c, &g, &[v(&[1.0]), v(&[1.0])], TimeGrid::new(20.0, 0.01).unwrap()).unwrap();
        let j = evaluate_cost(&traj, None);
        let expected = 0.5 * k1.k1[(0, 0)];
        assert!((j[0] - expected).abs() < 1e-6);
        assert!((j[1] - expected).abs() < 1e-6);
    }

    #[test]
    fn exchangeable_start_stays_exchangeable() {
        let (p, k0) = p1_k0();
        let c = CouplingWeight::players(4).unwrap();
        let g = extract_gains(&k0, &p, c);
        let traj = simulate_full(&p, c, &g, &vec![v(&[0.7]); 4], TimeGrid::new(3.0, 0.01).unwrap()).unwrap();
        for s in &traj.states {
            assert!(s.iter().all(|x| x == &s[0]));
        }
    }

    #[test]
    fn ten_player_cost_matches_the_value() {
        let (p, k0) = p1_k0();
        let c = CouplingWeight::players(10).unwrap();
        let cert = newton_solve(&p, c, &k0, &NewtonOptions::default()).unwrap();
        let g = extract_gains(&cert.k, &p, c);
        let x0 = vec![v(&[1.0]); 10];
        let traj = simulate_full(&p, c, &g, &x0, TimeGrid::new(30.0, 0.01).unwrap()).unwrap();
        let vz = v(&[1.0, 1.0]);
        let value = 0.5 * vz.dot(&(cert.k.full() * &vz));
        assert!((traj.final_costs()[0] - value).abs() < 1e-5);
    }

    #[test]
    fn reduction_and_symmetric_subspace() {
        let (p, k0) = p1_k0();
        let c = CouplingWeight::players(3).unwrap();
        let g = extract_gains(&k0, &p, c);
        let x0 = vec![v(&[1.0]), v(&[-0.5]), v(&[2.0])];
        let grid = TimeGrid::new(5.0, 0.01).unwrap();
        let full = simulate_full(&p, c, &g, &x0, grid).unwrap();
        let red = simulate_reduced(&p, c, &g, &x0[0], &v(&[2.5 / 3.0]), grid).unwrap();
        for k in 0..full.len() {
            let mean = full.states[k].iter().fold(0.0, |a, x| a + x[0]) / 3.0;
            assert!((red.states[k][1][0] - mean).abs() < 1e-9);
            assert!((red.states[k][0][0] - full.states[k][0][0]).abs() < 1e-9);
        }
        assert!((red.final_costs()[0] - full.final_costs()[0]).abs() < 1e-9);

        let same = simulate_reduced(&p, c, &g, &v(&[0.4]), &v(&[0.4]), grid).unwrap();
        assert!(same.states.iter().all(|s| (s[0][0] - s[1][0]).abs() < 1e-13));
    }

    #[test]
    fn limit_aggregate_ignores_the_player() {
        let (p, k0) = p1_k0();
        let ls = limit_dynamics(&p, &k0);
        let grid = TimeGrid::new(2.0, 0.01).unwrap();
        let a = simulate_limit(&p, &ls, &v(&[1.0]), &v(&[0.5]), grid).unwrap();
        let b = simulate_limit(&p, &ls, &v(&[-3.0]), &v(&[0.5]), grid).unwrap();
        let lambda2 = ls.aggregate_drift[(0, 0)];
        for k in 0..a.len() {
            assert_eq!(a.states[k][1], b.states[k][1]);
            assert!((a.states[k][1][0] - 0.5 * (lambda2 * a.times[k]).exp()).abs() < 1e-9);
        }
        let g = extract_gains(&k0, &p, CouplingWeight::limit());
        let r = simulate_reduced(&p, CouplingWeight::limit(), &g, &v(&[1.0]), &v(&[0.5]), grid).unwrap();
        assert!((r.final_state(0) - a.final_state(0)).norm() < 1e-14);
    }

    #[test]
    fn zero_state_costs_nothing() {
        let (p, k0) = p1_k0();
        let ls = limit_dynamics(&p, &k0);
        let t = simulate_limit(&p, &ls, &v(&[0.0]), &v(&[0.0]), TimeGrid::new(1.0, 0.01).unwrap()).unwrap();
        assert_eq!(evaluate_cost(&t, None), vec![0.0]);
    }

    #[test]
    fn finite_horizon_cost_matches_the_path_value() {
        let (p, _) = p1_k0();
        let spec = FiniteHorizonSpec::new(Mat::from_element(1, 1, 0.5), 4.0, 4000).unwrap();
        let path = finite_horizon_path(&p, &spec).unwrap();
        let (x1, z) = (v(&[1.0]), v(&[0.6]));
        let traj = simulate_finite_horizon(&p, &path, &x1, &z).unwrap();
        let j = evaluate_cost(&traj, Some(&spec))[0];
        let vz = v(&[1.0, 0.6]);
        let value = 0.5 * vz.dot(&(path.initial_value().full() * &vz));
        assert!((j - value).abs() < 1e-4, "{j} vs {value}");
    }

    #[test]
    fn rk4_error_shrinks_sixteenfold() {
        let p = GameParams::new(
            Mat::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]),
            Mat::from_row_slice(2, 2, &[0.1, 0.0, 0.2, -0.1]),
            Mat::from_row_slice(2, 1, &[0.0, 1.0]),
            Mat::from_row_slice(2, 1, &[0.0, 0.2]),
            Mat::identity(2, 2),
        )
        .unwrap();
        let c = CouplingWeight::players(3).unwrap();
        let g = FeedbackGains {
            l1: Mat::from_row_slice(1, 2, &[-0.5, -1.0]),
            l2: Mat::from_row_slice(1, 2, &[0.1, -0.2]),
        };
        let x1 = v(&[1.0, 0.0]);
        let z = v(&[0.2, -0.4]);
        let sys = augmented_dynamics(&p, &g, c);
        let acl = &sys.a + &sys.b * g.stacked();
        let exact = (&acl * 4.0).exp() * stack(&x1, &z);
        let err = |dt: f64| {
            let t = simulate_reduced(&p, c, &g, &x1, &z, TimeGrid::new(4.0, dt).unwrap()).unwrap();
            (stack(t.final_state(0), t.final_state(1)) - &exact).norm()
        };
        let ratio = err(0.04) / err(0.02);
        assert!((ratio.log2() - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn step_and_overflow_guards() {
        let p = GameParams::scalar(-100.0, 0.0, 0.0, 1.0).unwrap();
        let g = FeedbackGains::zero(&p);
        let c = CouplingWeight::players(2).unwrap();
        let err = simulate_full(&p, c, &g, &[v(&[1.0]), v(&[1.0])], TimeGrid::new(1.0, 0.01).unwrap());
        assert!(matches!(err, Err(Error::StepTooLarge { .. })));

        let p = GameParams::scalar(30.0, 0.0, 0.0, 1.0).unwrap();
        let err = simulate_full(&p, c, &g, &[v(&[1.0]), v(&[1.0])], TimeGrid::new(2.0, 0.001).unwrap());
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }

    #[test]
    fn csv_layout() {
        let (p, k0) = p1_k0();
        let c = CouplingWeight::players(2).unwrap();
        let g = extract_gains(&k0, &p, c);
        let t = simulate_full(&p, c, &g, &[v(&[1.0]), v(&[0.0])], TimeGrid::new(1.0, 0.025).unwrap().with_stride(20))
            .unwrap();
        assert_eq!(t.header(), vec!["time", "x1_1", "x2_1", "u1_1", "u2_1", "J1", "J2"]);
        assert_eq!(t.len(), 3);
        assert_eq!(t.row(2).len(), 7);
        assert_eq!(t.times, vec![0.0, 0.5, 1.0]);
        assert!(t.costs.windows(2).all(|w| w[1][0] >= w[0][0]));
    }
}
