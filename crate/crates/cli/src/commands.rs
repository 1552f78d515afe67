//! The four pipelines behind the subcommands.

use std::path::Path;

use lqnash::coupled_solver::{continuation_prefix, NewtonOptions, PartialSweep, SolveCertificate};
use lqnash::equilibrium::{
    best_response_gap, classify, convergence_check, finite_horizon_path, FiniteHorizonSpec,
};
use lqnash::game_model::{extract_gains, CouplingWeight, GameParams};
use lqnash::linalg::{Mat, Vector};
use lqnash::mean_field::limit_dynamics;
use lqnash::perturbation::{average_state, epsilon_bound, first_order_term, stack_state, SeriesTerm};
use lqnash::simulator::{simulate_full, simulate_limit, simulate_reduced, TimeGrid};
use lqnash::spectral_riccati::{limit_equilibria, ClassicalSolution, EnumerationOptions, LimitBranch, NashValue};
use lqnash::Tolerances;

use crate::input::{initial_states, Loaded};
use crate::report::{
    matrix, num, spectrum, write_json, write_table, write_trajectory, BranchReport,
    CertificateReport, ClassicalReport, GameEcho, LimitSimulationReport, Report,
    SimulationReport, SweepReport, UnreachedReport,
};
use crate::{BranchChoice, CliError, Command};

/// Horizon of the finite-horizon convergence test run by `classify`.
const FINITE_HORIZON: f64 = 20.0;
/// Default player counts when neither the file nor the command line gives any.
const DEFAULT_PLAYERS: [usize; 3] = [10, 100, 1000];
const DEFAULT_SWEEP: [usize; 5] = [10, 32, 100, 316, 1000];

pub struct Context {
    pub command: Command,
    pub loaded: Loaded,
    pub players: Vec<usize>,
    pub branch: BranchChoice,
}

impl Context {
    pub fn new(command: Command, loaded: Loaded, players: Option<Vec<usize>>, branch: BranchChoice) -> Self {
        let mut players = players
            .or_else(|| loaded.players.clone())
            .unwrap_or_else(|| match command {
                Command::Sweep => DEFAULT_SWEEP.to_vec(),
                _ => DEFAULT_PLAYERS.to_vec(),
            });
        // continuation runs from large M down
        players.sort_unstable_by(|a, b| b.cmp(a));
        players.dedup();
        Self {
            command,
            loaded,
            players,
            branch,
        }
    }

    fn game(&self) -> &GameParams {
        &self.loaded.game
    }

    fn tol(&self) -> &Tolerances {
        &self.loaded.tolerances
    }

    fn x0(&self, players: usize) -> Vec<Vector> {
        initial_states(self.loaded.x0.as_deref(), self.game().n(), players)
    }
}

struct Limit {
    classical: ClassicalSolution,
    selected: Vec<LimitBranch>,
}

fn solve_limit(cx: &Context) -> Result<Limit, CliError> {
    let opts = EnumerationOptions {
        tolerances: *cx.tol(),
        ..EnumerationOptions::default()
    };
    let (classical, branches) = limit_equilibria(cx.game(), &opts)?;
    let selected: Vec<LimitBranch> = match cx.branch {
        BranchChoice::All => branches,
        BranchChoice::Stable => branches.into_iter().filter(|b| b.y.stable_nash).collect(),
        BranchChoice::Index(k) => {
            let count = branches.len();
            let b = branches
                .into_iter()
                .nth(k)
                .ok_or_else(|| CliError::Invalid(format!("branch {k} requested but only {count} exist")))?;
            vec![b]
        }
    };
    if !selected.iter().any(|b| b.k0.is_some()) {
        return Err(CliError::NoStabilizingBranch);
    }
    Ok(Limit { classical, selected })
}

fn newton_options(tol: &Tolerances) -> NewtonOptions {
    NewtonOptions {
        tolerances: *tol,
        ..NewtonOptions::default()
    }
}

/// Certificates down to the first player count the branch cannot reach.
fn certificates(cx: &Context, k0: &NashValue, kbar: Option<&SeriesTerm>) -> Result<PartialSweep, CliError> {
    let partial = continuation_prefix(cx.game(), k0, kbar, &cx.players, &newton_options(cx.tol()))?;
    if let Some((m, e)) = &partial.failure {
        eprintln!("lqnash: branch not continued to M = {m}: {e}");
    }
    Ok(partial)
}

fn unreached(partial: &PartialSweep) -> Option<UnreachedReport> {
    partial.failure.as_ref().map(|(m, e)| UnreachedReport {
        players: *m,
        reason: e.to_string(),
    })
}

fn gap_for(cx: &Context, k: &NashValue, c: CouplingWeight) -> Option<f64> {
    let m = c.player_count()?;
    let g = extract_gains(k, cx.game(), c);
    best_response_gap(cx.game(), c, &g, &cx.x0(m), cx.tol()).ok().map(|g| g.max())
}

fn certificate_report(cx: &Context, cert: &SolveCertificate, kbar: Option<&SeriesTerm>) -> CertificateReport {
    let m = cert.w.player_count().unwrap_or(0);
    let epsilon = kbar.and_then(|t| epsilon_bound(t, cert.w, &cx.x0(m)).ok()).map(|e| e.value);
    CertificateReport {
        players: m,
        w: cert.w.w(),
        k: matrix(cert.k.full()),
        iterations: cert.iterations,
        final_residual: cert.final_residual,
        stable: cert.stable,
        closed_loop_spectrum: spectrum(&cert.closed_loop_spectrum),
        gap: gap_for(cx, &cert.k, cert.w),
        epsilon,
    }
}

fn branch_report(
    cx: &Context,
    classical: &ClassicalSolution,
    b: &LimitBranch,
    with_certificates: bool,
) -> Result<BranchReport, CliError> {
    let p = cx.game();
    let tol = cx.tol();
    let cls = classify(p, classical, b, None, tol)?;
    let (kbar, kbar1_error) = match &b.k0 {
        Some(k0) => match first_order_term(k0, p, tol) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        },
        None => (None, None),
    };
    let finite_horizon_converges = match (&b.k0, cx.command) {
        (Some(k0), Command::Classify) => {
            let spec = FiniteHorizonSpec::with_default_grid(Mat::zeros(p.n(), p.n()), FINITE_HORIZON)?;
            Some(
                finite_horizon_path(p, &spec)
                    .map(|path| convergence_check(&path, k0, 1e-5))
                    .unwrap_or(false),
            )
        }
        _ => None,
    };
    let (certs, stopped) = match (&b.k0, with_certificates) {
        (Some(k0), true) => {
            let partial = certificates(cx, k0, kbar.as_ref())?;
            let reports = partial
                .certificates
                .iter()
                .map(|c| certificate_report(cx, c, kbar.as_ref()))
                .collect();
            (reports, unreached(&partial))
        }
        _ => (Vec::new(), None),
    };
    Ok(BranchReport {
        index: b.index,
        y: matrix(&b.y.y),
        sign: b.y.branch.sign,
        residual: b.y.residual,
        stabilizing: cls.stabilizing,
        invertible: cls.invertible,
        stable_nash: cls.stable_nash,
        ac1_abscissa: cls.ac1_abscissa,
        ac2_abscissa: cls.ac2_abscissa,
        ac2_spectrum: spectrum(&b.y.ac2_spectrum),
        mirror_spectrum: spectrum(&b.y.mirror_spectrum),
        closed_loop_spectrum: spectrum(&cls.closed_loop_spectrum),
        own_sums: spectrum(&cls.own_sums),
        cross_sums: spectrum(&cls.cross_sums),
        aggregate_sums: spectrum(&cls.aggregate_sums),
        k0: b.k0.as_ref().map(|k| matrix(k.full())),
        kbar1: kbar.as_ref().map(|t| matrix(&t.kbar)),
        kbar1_error,
        finite_horizon_converges,
        certificates: certs,
        unreached: stopped,
    })
}

fn base_report(cx: &Context, classical: &ClassicalSolution, branches: Vec<BranchReport>) -> Report {
    let p = cx.game();
    let shown = cx.loaded.x0.clone().unwrap_or_else(|| vec![Vector::from_element(p.n(), 1.0)]);
    Report {
        command: cx.command.name().to_string(),
        game: GameEcho {
            n: p.n(),
            m: p.m(),
            a1: matrix(p.a1()),
            a2: matrix(p.a2()),
            b1: matrix(p.b1()),
            b2: matrix(p.b2()),
            q: matrix(p.q()),
        },
        tolerances: *cx.tol(),
        players: cx.players.clone(),
        x0: shown.iter().map(|x| x.iter().copied().collect()).collect(),
        classical: ClassicalReport {
            k1: matrix(&classical.k1),
            spectrum: spectrum(&classical.spectrum),
            residual: classical.residual,
        },
        branches,
        sweeps: Vec::new(),
        simulations: Vec::new(),
        limit_simulation: None,
    }
}

pub fn run(cx: &Context, out: &Path) -> Result<(), CliError> {
    let limit = solve_limit(cx)?;
    let with_certificates = matches!(cx.command, Command::Solve);
    let branches = limit
        .selected
        .iter()
        .map(|b| branch_report(cx, &limit.classical, b, with_certificates))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = base_report(cx, &limit.classical, branches);
    match cx.command {
        Command::Solve | Command::Classify => {}
        Command::Sweep => report.sweeps = sweep(cx, &limit, out)?,
        Command::Simulate => simulate(cx, &limit, out, &mut report)?,
    }
    write_json(out, &report)
}

/// Least-squares slope of `log y` against `log x` over the positive pairs.
fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn sweep(cx: &Context, limit: &Limit, out: &Path) -> Result<Vec<SweepReport>, CliError> {
    if cx.players.len() < 3 {
        return Err(CliError::Invalid("a sweep needs at least three player counts".to_string()));
    }
    let p = cx.game();
    let header: Vec<String> = ["M", "w", "dist_k0", "dist_first_order", "gap_k0_gains", "epsilon"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut reports = Vec::new();
    for b in &limit.selected {
        let Some(k0) = &b.k0 else { continue };
        let kbar = first_order_term(k0, p, cx.tol()).ok();
        let partial = certificates(cx, k0, kbar.as_ref())?;
        let mut rows = Vec::new();
        let (mut ws, mut d1, mut d2, mut gaps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        // smallest w first in the table
        for cert in &partial.certificates {
            let w = cert.w.w();
            let m = cert.w.player_count().unwrap_or(0);
            let diff = cert.k.full() - k0.full();
            let dist = diff.norm();
            let second = kbar.as_ref().map(|t| (&diff - &t.kbar * w).norm());
            let gap = gap_for(cx, k0, cert.w);
            let eps = kbar
                .as_ref()
                .and_then(|t| epsilon_bound(t, cert.w, &cx.x0(m)).ok())
                .map(|e| e.value);
            ws.push(w);
            d1.push(dist);
            d2.push(second.unwrap_or(f64::NAN));
            gaps.push(gap.unwrap_or(f64::NAN));
            rows.push(vec![m.to_string(), num(w), num(dist), opt_num(second), opt_num(gap), opt_num(eps)]);
        }
        let s1 = loglog_slope(&ws, &d1);
        let s2 = kbar.as_ref().and_then(|_| loglog_slope(&ws, &d2));
        let s3 = loglog_slope(&ws, &gaps);
        rows.push(vec![
            "slope".to_string(),
            String::new(),
            opt_num(s1),
            opt_num(s2),
            opt_num(s3),
            String::new(),
        ]);
        let name = format!("sweep_branch{}.csv", b.index);
        write_table(&out.join(&name), &header, &rows)?;
        reports.push(SweepReport {
            branch: b.index,
            csv: name,
            slope_distance: s1,
            slope_second_order: s2,
            slope_gap: s3,
            unreached: unreached(&partial),
        });
    }
    Ok(reports)
}

fn simulate(cx: &Context, limit: &Limit, out: &Path, report: &mut Report) -> Result<(), CliError> {
    let sim = cx
        .loaded
        .sim
        .clone()
        .ok_or_else(|| CliError::Invalid("simulate needs a `sim` block with T and dt".to_string()))?;
    if cx.loaded.x0.is_none() {
        return Err(CliError::Invalid("simulate needs initial states `x0`".to_string()));
    }
    let p = cx.game();
    let branch = limit
        .selected
        .iter()
        .find(|b| b.k0.is_some())
        .ok_or(CliError::NoStabilizingBranch)?;
    let k0 = branch.k0.as_ref().unwrap();
    let grid = TimeGrid::new(sim.t, sim.dt)?;
    let kbar = first_order_term(k0, p, cx.tol()).ok();
    for cert in certificates(cx, k0, kbar.as_ref())?.certificates {
        let c = cert.w;
        let m = c.player_count().unwrap_or(0);
        let x0 = cx.x0(m);
        let z0 = average_state(&x0);
        let g = extract_gains(&cert.k, p, c);
        let full = simulate_full(p, c, &g, &x0, grid)?;
        let reduced = simulate_reduced(p, c, &g, &x0[0], &z0, grid)?;
        let mut residual: f64 = 0.0;
        for k in 0..full.len() {
            let mean = average_state(&full.states[k]);
            let a = stack_state(&full.states[k][0], &mean);
            let b = stack_state(&reduced.states[k][0], &reduced.states[k][1]);
            residual = residual.max((a - b).amax());
        }
        let v = stack_state(&x0[0], &z0);
        let full_csv = format!("trajectory_full_M{m}.csv");
        let reduced_csv = format!("trajectory_reduced_M{m}.csv");
        write_trajectory(&out.join(&full_csv), &full)?;
        write_trajectory(&out.join(&reduced_csv), &reduced)?;
        report.simulations.push(SimulationReport {
            players: m,
            full_costs: full.final_costs().to_vec(),
            reduced_cost: reduced.final_costs()[0],
            value: 0.5 * v.dot(&(cert.k.full() * &v)),
            reduction_residual: residual,
            full_csv,
            reduced_csv,
        });
    }
    // the limit system starts from the first listed state and its mean
    let x1 = cx.loaded.x0.as_ref().unwrap()[0].clone();
    let z0 = average_state(cx.loaded.x0.as_ref().unwrap());
    let traj = simulate_limit(p, &limit_dynamics(p, k0), &x1, &z0, grid)?;
    let v = stack_state(&x1, &z0);
    let csv = "trajectory_limit.csv".to_string();
    write_trajectory(&out.join(&csv), &traj)?;
    report.limit_simulation = Some(LimitSimulationReport {
        cost: traj.final_costs()[0],
        value: 0.5 * v.dot(&(k0.full() * &v)),
        csv,
    });
    Ok(())
}
