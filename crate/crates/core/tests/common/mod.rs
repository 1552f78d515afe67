//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use lqnash::game_model::{augmented_dynamics, extract_gains, CouplingWeight, GameParams};
use lqnash::linalg::{Mat, Vector};
use lqnash::spectral_riccati::{limit_equilibria, EnumerationOptions, NashValue};
use lqnash::perturbation::first_order_term;
use lqnash::Tolerances;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed forms of the scalar game (B1 = 1, B2 = b).
#[derive(Debug, Clone, Copy)]
pub struct ScalarForms {
    pub k1: f64,
    pub lambda1: f64,
}

/// One root of the scalar aggregate equation.
#[derive(Debug, Clone, Copy)]
pub struct ScalarRoot {
    pub eps: i8,
    pub y: f64,
    pub lambda2: f64,
    pub lambda_bar: f64,
}

pub fn scalar_forms(a1: f64, q: f64) -> ScalarForms {
    let r = (a1 * a1 + q).sqrt();
    // a1 + r without cancellation when a1 < 0
    let k1 = if a1 >= 0.0 { a1 + r } else { q / (r - a1) };
    ScalarForms {
        k1,
        lambda1: -r,
    }
}

pub fn scalar_delta(a1: f64, a: f64, b: f64, q: f64) -> f64 {
    (2.0 * a1 + a).powi(2) + 4.0 * q * (1.0 + b)
}

/// Both roots `y = (2a1 + a + ε√Δ) / (2(1+b))`, `λ2 = (a − ε√Δ)/2`,
/// `λ̄ = (−a − ε√Δ)/2`, each evaluated without cancellation.
pub fn scalar_roots(a1: f64, a: f64, b: f64, q: f64) -> [ScalarRoot; 2] {
    let d = scalar_delta(a1, a, b, q);
    let sd = d.sqrt();
    let c = 2.0 * a1 + a;
    let s = 1.0 + b;
    // y: roots of s y² − c y − q = 0, product −q/s
    let y_of = |eps: f64| {
        if eps * c >= 0.0 {
            (c + eps * sd) / (2.0 * s)
        } else {
            -2.0 * q / (c - eps * sd)
        }
    };
    // λ2 and λ̄ roots share the product (a² − Δ)/4 = −a1(a1+a) − q(1+b)
    let prod = -a1 * (a1 + a) - q * s;
    let pair = |center: f64, eps: f64| {
        // center − ε√Δ/2 with the other root from the product
        if -eps * center >= 0.0 {
            (center - eps * sd) / 2.0
        } else {
            4.0 * prod / (2.0 * (center + eps * sd))
        }
    };
    let mk = |eps: f64| ScalarRoot {
        eps: eps as i8,
        y: y_of(eps),
        lambda2: pair(a, eps),
        lambda_bar: pair(-a, eps),
    };
    [mk(1.0), mk(-1.0)]
}

/// `R(K, w)` assembled from the gains and player 1's augmented system,
/// without the expanded drift used by the solver.
pub fn independent_residual(k: &NashValue, c: CouplingWeight, p: &GameParams) -> Mat {
    let g = extract_gains(k, p, c);
    let sys = augmented_dynamics(p, &g, c);
    let kf = k.full();
    kf * &sys.a + sys.a.transpose() * kf + p.augmented_cost() - kf * &sys.b * sys.b.transpose() * kf
}

fn kron_lyapunov(a: &Mat, c: &Mat) -> Mat {
    // aᵀ X + X a = −c
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let big = eye.kronecker(&a.transpose()) + a.transpose().kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let x = big.lu().solve(&rhs).expect("Lyapunov oracle singular");
    let x = Mat::from_column_slice(n, n, x.as_slice());
    (&x + x.transpose()) * 0.5
}

/// Two-player game written on the full state `(x1, x2)` and solved by the
/// Lyapunov iteration of the coupled Riccati equations. Returns player 1's
/// value in `(x1, z)` coordinates.
pub fn two_player_value(p: &GameParams, start: &NashValue) -> Mat {
    let n = p.n();
    let (a1, a2, b1, b2, q) = (p.a1(), p.a2(), p.b1(), p.b2(), p.q());
    let half = 0.5;
    let f = {
        let d = a1 + a2 * half;
        let o = a2 * half;
        let mut m = Mat::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&d);
        m.view_mut((0, n), (n, n)).copy_from(&o);
        m.view_mut((n, 0), (n, n)).copy_from(&o);
        m.view_mut((n, n), (n, n)).copy_from(&d);
        m
    };
    let stackv = |top: Mat, bot: Mat| {
        let mut m = Mat::zeros(2 * n, top.ncols());
        m.rows_mut(0, n).copy_from(&top);
        m.rows_mut(n, n).copy_from(&bot);
        m
    };
    let g1 = stackv(b1 + b2 * half, b2 * half);
    let g2 = stackv(b2 * half, b1 + b2 * half);
    let mut q1 = Mat::zeros(2 * n, 2 * n);
    q1.view_mut((0, 0), (n, n)).copy_from(q);
    let mut swap = Mat::zeros(2 * n, 2 * n);
    for i in 0..n {
        swap[(i, n + i)] = 1.0;
        swap[(n + i, i)] = 1.0;
    }
    let mut t = Mat::zeros(2 * n, 2 * n);
    for i in 0..n {
        t[(i, i)] = 1.0;
        t[(n + i, i)] = 0.5;
        t[(n + i, n + i)] = 0.5;
    }
    let mut p1 = t.transpose() * start.full() * &t;
    for _ in 0..500 {
        let p2 = &swap * &p1 * &swap;
        let acl = &f - &g1 * g1.transpose() * &p1 - &g2 * g2.transpose() * &p2;
        let forcing = &q1 + &p1 * &g1 * g1.transpose() * &p1;
        let next = kron_lyapunov(&acl, &forcing);
        let change = (&next - &p1).norm();
        p1 = next;
        if change < 1e-14 * (1.0 + p1.norm()) {
            break;
        }
    }
    // back to (x1, z): x = T⁻¹ v
    let t_inv = t.try_inverse().unwrap();
    t_inv.transpose() * p1 * t_inv
}

pub fn scalar_game(a1: f64, a: f64, b: f64, q: f64) -> GameParams {
    GameParams::scalar(a1, a, b, q).unwrap()
}

pub fn p1() -> GameParams {
    scalar_game(-1.0, 1.0, 0.0, 3.0)
}

pub fn two_branch() -> GameParams {
    scalar_game(1.0, -4.0, 0.0, 1.0)
}

pub fn first_k0(p: &GameParams) -> NashValue {
    let (_, b) = limit_equilibria(p, &EnumerationOptions::default()).unwrap();
    b.into_iter().find_map(|b| b.k0).expect("no stabilizing branch")
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Random game with a stabilizing, invertible limit branch.
pub fn random_game(rng: &mut ChaCha8Rng, n: usize, m: usize) -> GameParams {
    loop {
        let a1 = uniform(rng, n, n, -1.0, 1.0) - Mat::identity(n, n) * 0.5;
        let a2 = uniform(rng, n, n, -0.4, 0.4);
        let b1 = uniform(rng, n, m, -1.0, 1.0);
        let b2 = uniform(rng, n, m, -0.3, 0.3);
        let c = uniform(rng, n, n, -1.0, 1.0);
        let q = c.transpose() * &c + Mat::identity(n, n) * 0.1;
        let Ok(p) = GameParams::new(a1, a2, b1, b2, q) else {
            continue;
        };
        let Ok((_, branches)) = limit_equilibria(&p, &EnumerationOptions::default()) else {
            continue;
        };
        let Some(k0) = branches.iter().find_map(|b| b.k0.clone()) else {
            continue;
        };
        if first_order_term(&k0, &p, &Tolerances::default()).is_ok() {
            return p;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scalar_vec(v: f64, count: usize) -> Vec<Vector> {
    vec![Vector::from_element(1, v); count]
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
