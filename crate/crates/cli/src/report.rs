//! Serializable report types and table writers.

use std::fs;
use std::path::Path;

use lqnash::linalg::Mat;
use lqnash::simulator::Trajectory;
use lqnash::Tolerances;
use num_complex::Complex64;
use serde::Serialize;

use crate::CliError;

pub fn matrix(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// `[re, im]` pairs.
pub fn spectrum(s: &[Complex64]) -> Vec<[f64; 2]> {
    s.iter().map(|z| [z.re, z.im]).collect()
}

#[derive(Debug, Serialize)]
pub struct GameEcho {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "A1")]
    pub a1: Vec<Vec<f64>>,
    #[serde(rename = "A2")]
    pub a2: Vec<Vec<f64>>,
    #[serde(rename = "B1")]
    pub b1: Vec<Vec<f64>>,
    #[serde(rename = "B2")]
    pub b2: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct ClassicalReport {
    pub k1: Vec<Vec<f64>>,
    pub spectrum: Vec<[f64; 2]>,
    pub residual: f64,
}

#[derive(Debug, Serialize)]
pub struct CertificateReport {
    #[serde(rename = "M")]
    pub players: usize,
    pub w: f64,
    pub k: Vec<Vec<f64>>,
    pub iterations: usize,
    pub final_residual: f64,
    pub stable: bool,
    pub closed_loop_spectrum: Vec<[f64; 2]>,
    /// Largest best-response gap under the gains of `k`.
    pub gap: Option<f64>,
    /// First-order deviation estimate for player 1.
    pub epsilon: Option<f64>,
}

/// First player count a branch could not be continued to.
#[derive(Debug, Serialize)]
pub struct UnreachedReport {
    #[serde(rename = "M")]
    pub players: usize,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct BranchReport {
    pub index: usize,
    pub y: Vec<Vec<f64>>,
    pub sign: Option<i8>,
    pub residual: f64,
    pub stabilizing: bool,
    pub invertible: bool,
    pub stable_nash: bool,
    pub ac1_abscissa: f64,
    pub ac2_abscissa: f64,
    pub ac2_spectrum: Vec<[f64; 2]>,
    pub mirror_spectrum: Vec<[f64; 2]>,
    pub closed_loop_spectrum: Vec<[f64; 2]>,
    pub own_sums: Vec<[f64; 2]>,
    pub cross_sums: Vec<[f64; 2]>,
    pub aggregate_sums: Vec<[f64; 2]>,
    pub k0: Option<Vec<Vec<f64>>>,
    pub kbar1: Option<Vec<Vec<f64>>>,
    /// Why `kbar1` is missing, when it is.
    pub kbar1_error: Option<String>,
    /// Finite-horizon flow from `Qf = 0` reaches `k0`.
    pub finite_horizon_converges: Option<bool>,
    pub certificates: Vec<CertificateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unreached: Option<UnreachedReport>,
}

#[derive(Debug, Serialize)]
pub struct SimulationReport {
    #[serde(rename = "M")]
    pub players: usize,
    pub full_costs: Vec<f64>,
    pub reduced_cost: f64,
    /// `½ vᵀ K v` for player 1.
    pub value: f64,
    /// Largest gap between the full simulation's `(x1, mean)` and the
    /// reduced simulation.
    pub reduction_residual: f64,
    pub full_csv: String,
    pub reduced_csv: String,
}

#[derive(Debug, Serialize)]
pub struct LimitSimulationReport {
    pub cost: f64,
    pub value: f64,
    pub csv: String,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub branch: usize,
    pub csv: String,
    pub slope_distance: Option<f64>,
    pub slope_second_order: Option<f64>,
    pub slope_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unreached: Option<UnreachedReport>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub game: GameEcho,
    pub tolerances: Tolerances,
    #[serde(rename = "M")]
    pub players: Vec<usize>,
    pub x0: Vec<Vec<f64>>,
    pub classical: ClassicalReport,
    pub branches: Vec<BranchReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweeps: Vec<SweepReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub simulations: Vec<SimulationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit_simulation: Option<LimitSimulationReport>,
}

/// 17 significant digits, enough to round-trip every `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_json(dir: &Path, report: &Report) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(dir.join("report.json"), text + "\n").map_err(|e| CliError::Output(e.to_string()))
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let out = |e: csv::Error| CliError::Output(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(out)?;
    w.write_record(header).map_err(out)?;
    for r in rows {
        w.write_record(r).map_err(out)?;
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = (0..traj.len())
        .map(|k| traj.row(k).into_iter().map(num).collect())
        .collect();
    write_table(path, &traj.header(), &rows)
}
