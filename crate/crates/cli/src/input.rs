//! Game files and run configuration.

use std::fs;
use std::path::Path;

use lqnash::game_model::{validate_game, GameParams, RawGame};
use lqnash::linalg::{Mat, Vector};
use lqnash::Tolerances;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Row-major matrix as nested arrays.
type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    #[serde(rename = "T")]
    pub t: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameFile {
    n: usize,
    m: usize,
    #[serde(rename = "A1")]
    a1: Rows,
    #[serde(rename = "A2")]
    a2: Rows,
    #[serde(rename = "B1")]
    b1: Rows,
    #[serde(rename = "B2")]
    b2: Rows,
    #[serde(rename = "Q")]
    q: Rows,
    #[serde(rename = "M")]
    players: Option<Vec<usize>>,
    x0: Option<Vec<Vec<f64>>>,
    sim: Option<SimBlock>,
    tolerances: Option<Map<String, Value>>,
}

/// Everything a command needs, after validation.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub game: GameParams,
    pub players: Option<Vec<usize>>,
    /// Initial states as given; cycled over the players.
    pub x0: Option<Vec<Vector>>,
    pub sim: Option<SimBlock>,
    pub tolerances: Tolerances,
}

fn to_matrix(name: &str, rows: &Rows, r: usize, c: usize) -> Result<Mat, CliError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Invalid(format!("{name} must be {r}x{c}")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

/// Applies `key=value` overrides on top of `base`; unknown keys are errors.
pub fn merge_tolerances(base: Tolerances, overrides: &Map<String, Value>) -> Result<Tolerances, CliError> {
    let mut map = match serde_json::to_value(base) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("tolerances serialize to an object"),
    };
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Invalid(format!("tolerances: {e}")))
}

/// Parses `--tol res=1e-8,eig=1e-6`.
pub fn parse_tol_overrides(items: &[String]) -> Result<Map<String, Value>, CliError> {
    let mut out = Map::new();
    for item in items.iter().flat_map(|s| s.split(',')).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("tolerance override `{item}` is not key=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(format!("tolerance override `{item}` has a non-numeric value")))?;
        out.insert(k.trim().to_string(), Value::from(v));
    }
    Ok(out)
}

pub fn load(path: &Path, tol_overrides: &Map<String, Value>) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let file: GameFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let (n, m) = (file.n, file.m);
    let raw = RawGame {
        a1: to_matrix("A1", &file.a1, n, n)?,
        a2: to_matrix("A2", &file.a2, n, n)?,
        b1: to_matrix("B1", &file.b1, n, m)?,
        b2: to_matrix("B2", &file.b2, n, m)?,
        q: to_matrix("Q", &file.q, n, n)?,
    };
    let from_file = match &file.tolerances {
        Some(t) => merge_tolerances(Tolerances::default(), t)?,
        None => Tolerances::default(),
    };
    let tolerances = merge_tolerances(from_file, tol_overrides)?;
    let game = validate_game(raw, tolerances.psd_rel)?;
    let x0 = match file.x0 {
        Some(states) => {
            if states.is_empty() || states.iter().any(|x| x.len() != n) {
                return Err(CliError::Invalid(format!("x0 must be a non-empty list of length-{n} states")));
            }
            Some(states.into_iter().map(Vector::from_vec).collect())
        }
        None => None,
    };
    if let Some(ms) = &file.players {
        check_players(ms)?;
    }
    Ok(Loaded {
        game,
        players: file.players,
        x0,
        sim: file.sim,
        tolerances,
    })
}

pub fn check_players(ms: &[usize]) -> Result<(), CliError> {
    if let Some(bad) = ms.iter().find(|&&m| m < 2) {
        return Err(CliError::Invalid(format!("player counts must be at least 2, got {bad}")));
    }
    Ok(())
}

/// Initial states for `players` players: the given list repeated, or ones.
pub fn initial_states(x0: Option<&[Vector]>, n: usize, players: usize) -> Vec<Vector> {
    match x0 {
        Some(list) => (0..players).map(|i| list[i % list.len()].clone()).collect(),
        None => vec![Vector::from_element(n, 1.0); players],
    }
}
