//! Problem statement of the symmetric M-player game and the single-player
//! view of it.
//!
//! Every player `i` has state `x_i ∈ Rⁿ` and control `u_i ∈ Rᵐ` with
//!
//! ```text
//! dx_i/dt = A1 x_i + A2 z + B1 u_i + B2 ū,   z = (1/M) Σ x_j,  ū = (1/M) Σ u_j
//! J_i     = ½ ∫ (x_iᵀ Q x_i + u_iᵀ u_i) dt
//! ```
//!
//! Under the symmetric strategy `u_i = L1 x_i + L2 z` used by everybody but
//! player 1, the pair `(x_1, z)` obeys a closed 2n-dimensional system driven
//! by `u_1` alone; [`augmented_dynamics`] builds it.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block2, spectral_norm, sym, vstack, Mat};
use crate::spectral_riccati::NashValue;

/// Validated game data. Immutable; construct through [`GameParams::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct GameParams {
    a1: Mat,
    a2: Mat,
    b1: Mat,
    b2: Mat,
    q: Mat,
    n: usize,
    m: usize,
}

/// Unvalidated game data, as read from a file or assembled by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGame {
    pub a1: Mat,
    pub a2: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub q: Mat,
}

fn shape_str(r: usize, c: usize) -> String {
    format!("{r}x{c}")
}

fn check_shape(what: &'static str, m: &Mat, r: usize, c: usize) -> Result<()> {
    if m.shape() != (r, c) {
        return Err(Error::DimensionMismatch {
            what,
            expected: shape_str(r, c),
            found: shape_str(m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

/// Checks shapes and the cost weight; symmetrizes `Q` when its asymmetry is
/// within `psd_rel · ‖Q‖₂`.
pub fn validate_game(raw: RawGame, psd_rel: f64) -> Result<GameParams> {
    let n = raw.a1.nrows();
    let m = raw.b1.ncols();
    if n == 0 || m == 0 {
        return Err(Error::DimensionMismatch {
            what: "state/control dimension",
            expected: "n >= 1 and m >= 1".to_string(),
            found: format!("n = {n}, m = {m}"),
        });
    }
    check_shape("A1", &raw.a1, n, n)?;
    check_shape("A2", &raw.a2, n, n)?;
    check_shape("B1", &raw.b1, n, m)?;
    check_shape("B2", &raw.b2, n, m)?;
    check_shape("Q", &raw.q, n, n)?;
    for (name, mat) in [
        ("A1", &raw.a1),
        ("A2", &raw.a2),
        ("B1", &raw.b1),
        ("B2", &raw.b2),
        ("Q", &raw.q),
    ] {
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch {
                what: name,
                expected: "finite entries".to_string(),
                found: "non-finite entry".to_string(),
            });
        }
    }

    let tol = psd_rel * spectral_norm(&raw.q);
    let asymmetry = spectral_norm(&(&raw.q - raw.q.transpose()));
    if asymmetry > tol {
        return Err(Error::AsymmetricCost {
            asymmetry,
            tolerance: tol,
        });
    }
    let q = sym(&raw.q);
    let min_eigenvalue = SymmetricEigen::new(q.clone()).eigenvalues.min();
    if min_eigenvalue < -tol {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue });
    }
    Ok(GameParams {
        a1: raw.a1,
        a2: raw.a2,
        b1: raw.b1,
        b2: raw.b2,
        q,
        n,
        m,
    })
}

impl GameParams {
    /// Validates with the default threshold `1e-10 · ‖Q‖₂`.
    pub fn new(a1: Mat, a2: Mat, b1: Mat, b2: Mat, q: Mat) -> Result<Self> {
        validate_game(RawGame { a1, a2, b1, b2, q }, 1e-10)
    }

    /// Scalar game with `B1 = 1`: `(a1, a, b, q)` are `A1, A2, B2, Q`.
    pub fn scalar(a1: f64, a: f64, b: f64, q: f64) -> Result<Self> {
        let s = |v: f64| Mat::from_element(1, 1, v);
        Self::new(s(a1), s(a), s(1.0), s(b), s(q))
    }

    pub fn a1(&self) -> &Mat {
        &self.a1
    }
    pub fn a2(&self) -> &Mat {
        &self.a2
    }
    pub fn b1(&self) -> &Mat {
        &self.b1
    }
    pub fn b2(&self) -> &Mat {
        &self.b2
    }
    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }

    /// `A1 + A2`, the drift of the aggregate state.
    pub fn a_sum(&self) -> Mat {
        &self.a1 + &self.a2
    }

    /// `B1 + B2`, the input matrix of the aggregate state.
    pub fn b_sum(&self) -> Mat {
        &self.b1 + &self.b2
    }

    /// `(B1 + B2) B1ᵀ`, the quadratic coefficient of the aggregate Riccati
    /// equation.
    pub fn s_mix(&self) -> Mat {
        self.b_sum() * self.b1.transpose()
    }

    /// `[[A1, A2], [0, A1 + A2]]`.
    pub fn base_drift(&self) -> Mat {
        let z = Mat::zeros(self.n, self.n);
        block2(&self.a1, &self.a2, &z, &self.a_sum())
    }

    /// `[B2; B1 + B2]`: how the common control average enters `(x_1, z)`.
    pub fn coupling_input(&self) -> Mat {
        vstack(&self.b2, &self.b_sum())
    }

    /// `[B1 + w B2; w (B1 + B2)]`: player 1's input matrix in `(x_1, z)`.
    pub fn player_input(&self, w: f64) -> Mat {
        vstack(&(&self.b1 + &self.b2 * w), &(self.b_sum() * w))
    }

    /// `diag(Q, 0)`.
    pub fn augmented_cost(&self) -> Mat {
        let mut out = Mat::zeros(2 * self.n, 2 * self.n);
        out.view_mut((0, 0), (self.n, self.n)).copy_from(&self.q);
        out
    }

    /// `[[0, I], [0, I]]`.
    pub fn aggregate_selector(&self) -> Mat {
        let n = self.n;
        let mut j = Mat::zeros(2 * n, 2 * n);
        for i in 0..n {
            j[(i, n + i)] = 1.0;
            j[(n + i, n + i)] = 1.0;
        }
        j
    }
}

/// Coupling weight `w = 1/M`; `w = 0` is the infinite-population limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingWeight {
    w: f64,
    players: Option<usize>,
}

impl CouplingWeight {
    pub fn players(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidCoupling(format!(
                "player count must be at least 2, got {m}"
            )));
        }
        Ok(Self {
            w: 1.0 / m as f64,
            players: Some(m),
        })
    }

    pub fn limit() -> Self {
        Self {
            w: 0.0,
            players: None,
        }
    }

    /// Continuous weight in `[0, 1/2]`, used for continuation and
    /// finite-difference studies.
    pub fn continuous(w: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&w) {
            return Err(Error::InvalidCoupling(format!(
                "w must lie in [0, 1/2], got {w}"
            )));
        }
        Ok(Self { w, players: None })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn player_count(&self) -> Option<usize> {
        self.players
    }
}

/// `u_i = L1 x_i + L2 z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGains {
    pub l1: Mat,
    pub l2: Mat,
}

impl FeedbackGains {
    pub fn zero(p: &GameParams) -> Self {
        Self {
            l1: Mat::zeros(p.m(), p.n()),
            l2: Mat::zeros(p.m(), p.n()),
        }
    }

    /// `[L1 L2]` as one m×2n row block.
    pub fn stacked(&self) -> Mat {
        let (m, n) = self.l1.shape();
        let mut out = Mat::zeros(m, 2 * n);
        out.columns_mut(0, n).copy_from(&self.l1);
        out.columns_mut(n, n).copy_from(&self.l2);
        out
    }
}

/// Player 1's linear system `d/dt (x_1, z) = A (x_1, z) + B u_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    pub a: Mat,
    pub b: Mat,
}

/// Builds player 1's view of the game when every other player uses `g`.
///
/// `A = [[A1, A2], [0, A1+A2]] + [B2; B1+B2] [0, L1+L2] − w [B2; B1+B2] [L1, L2]`.
pub fn augmented_dynamics(p: &GameParams, g: &FeedbackGains, c: CouplingWeight) -> AugmentedSystem {
    let n = p.n();
    let w = c.w();
    let e = p.coupling_input();
    let mut aggregate_only = Mat::zeros(p.m(), 2 * n);
    aggregate_only
        .columns_mut(n, n)
        .copy_from(&(&g.l1 + &g.l2));
    let a = p.base_drift() + &e * aggregate_only - (&e * g.stacked()) * w;
    AugmentedSystem {
        a,
        b: p.player_input(w),
    }
}

/// `[L1 L2] = −[(B1 + B2 w)ᵀ  (B1 + B2)ᵀ w] K`.
pub fn extract_gains(k: &NashValue, p: &GameParams, c: CouplingWeight) -> FeedbackGains {
    let n = p.n();
    let stacked = -(p.player_input(c.w()).transpose() * k.full());
    FeedbackGains {
        l1: stacked.columns(0, n).into_owned(),
        l2: stacked.columns(n, n).into_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn scalar_game_is_accepted() {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        assert_eq!((p.n(), p.m()), (1, 1));
        assert_eq!(p.q()[(0, 0)], 3.0);
    }

    #[test]
    fn asymmetric_cost_rejected() {
        let q = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let z = Mat::zeros(2, 2);
        let b = Mat::zeros(2, 1);
        let err = GameParams::new(z.clone(), z, b.clone(), b, q).unwrap_err();
        assert!(matches!(err, Error::AsymmetricCost { .. }));
    }

    #[test]
    fn indefinite_cost_rejected() {
        let err = GameParams::scalar(0.0, 0.0, 0.0, -1.0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveSemidefinite { .. }));
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized() {
        let q = Mat::from_row_slice(2, 2, &[2.0, 1.0 + 1e-13, 1.0, 2.0]);
        let z = Mat::zeros(2, 2);
        let b = Mat::zeros(2, 1);
        let p = GameParams::new(z.clone(), z, b.clone(), b, q).unwrap();
        assert_eq!(p.q(), &p.q().transpose());
    }

    #[test]
    fn shape_errors() {
        let err = GameParams::new(s(1.0), Mat::zeros(2, 2), s(1.0), s(0.0), s(1.0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "A2", .. }));
        let err = GameParams::new(s(1.0), s(1.0), s(1.0), Mat::zeros(1, 2), s(1.0)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { what: "B2", .. }));
    }

    #[test]
    fn coupling_weight_bounds() {
        assert!(CouplingWeight::players(1).is_err());
        assert_eq!(CouplingWeight::players(4).unwrap().w(), 0.25);
        assert!(CouplingWeight::continuous(0.6).is_err());
        assert_eq!(CouplingWeight::limit().w(), 0.0);
    }

    #[test]
    fn zero_gains_in_the_limit() {
        let p = GameParams::scalar(-1.0, 1.0, 0.5, 3.0).unwrap();
        let sys = augmented_dynamics(&p, &FeedbackGains::zero(&p), CouplingWeight::limit());
        assert_eq!(sys.a, Mat::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]));
        assert_eq!(sys.b, Mat::from_row_slice(2, 1, &[1.0, 0.0]));
    }

    #[test]
    fn hand_substituted_scalar_drift() {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let g = FeedbackGains {
            l1: s(-1.0),
            l2: s(-0.3),
        };
        let sys = augmented_dynamics(&p, &g, CouplingWeight::limit());
        // B2 = 0: the gains reach only the aggregate row
        let expected = Mat::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.3]);
        assert!((&sys.a - expected).norm() < 1e-15);

        let p = GameParams::scalar(-1.0, 1.0, 1.0, 3.0).unwrap();
        let sys = augmented_dynamics(&p, &g, CouplingWeight::limit());
        let expected = Mat::from_row_slice(2, 2, &[-1.0, -0.3, 0.0, -2.6]);
        assert!((&sys.a - expected).norm() < 1e-15);
    }

    #[test]
    fn gains_from_limit_value() {
        let p = GameParams::scalar(-1.0, 1.0, 0.0, 3.0).unwrap();
        let k = NashValue::from_blocks(s(1.0), s(0.302776), s(0.197224));
        let g = extract_gains(&k, &p, CouplingWeight::limit());
        assert!((g.l1[(0, 0)] + 1.0).abs() < 1e-15);
        assert!((g.l2[(0, 0)] + 0.302776).abs() < 1e-15);
        let zero = NashValue::from_blocks(s(0.0), s(0.0), s(0.0));
        assert_eq!(extract_gains(&zero, &p, CouplingWeight::limit()), FeedbackGains::zero(&p));
    }
}
