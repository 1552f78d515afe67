//! Dense kernels: reorderable real Schur form, Kronecker-form Sylvester and
//! Lyapunov solvers, the Hamiltonian CARE solver and spectrum utilities.
//!
//! Problem sizes here are control-sized (a few states per player), so the
//! Sylvester family is solved through the vectorized Kronecker system with a
//! pivoted LU factorization rather than Bartels–Stewart.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative pivot size below which an LU factorization is treated as singular.
const PIVOT_FLOOR: f64 = 1e-14;

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// 2-norm condition number; infinite for rank-deficient input.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let (lo, hi) = (sv.min(), sv.max());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn block2(a11: &Mat, a12: &Mat, a21: &Mat, a22: &Mat) -> Mat {
    let (r1, c1) = a11.shape();
    let (r2, c2) = a22.shape();
    let mut out = Mat::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(a11);
    out.view_mut((0, c1), (r1, c2)).copy_from(a12);
    out.view_mut((r1, 0), (r2, c1)).copy_from(a21);
    out.view_mut((r1, c1), (r2, c2)).copy_from(a22);
    out
}

pub fn vstack(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Upper-triangle coordinates of a symmetric d×d matrix, row by row.
pub fn vech_index(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

pub fn vech(m: &Mat) -> Vector {
    let idx = vech_index(m.nrows());
    Vector::from_iterator(idx.len(), idx.iter().map(|&(i, j)| m[(i, j)]))
}

/// Inverse of [`vech`]: fills both triangles.
pub fn unvech(v: &Vector, d: usize) -> Mat {
    let mut out = Mat::zeros(d, d);
    for (&(i, j), &x) in vech_index(d).iter().zip(v.iter()) {
        out[(i, j)] = x;
        out[(j, i)] = x;
    }
    out
}

/// Dense matrix of a linear map on symmetric d×d matrices that returns
/// symmetric matrices, in [`vech`] coordinates.
pub fn symmetric_operator_matrix(d: usize, apply: impl Fn(&Mat) -> Mat) -> Mat {
    let idx = vech_index(d);
    let mut out = Mat::zeros(idx.len(), idx.len());
    for (col, &(i, j)) in idx.iter().enumerate() {
        let mut e = Mat::zeros(d, d);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        out.set_column(col, &vech(&apply(&e)));
    }
    out
}

/// LU solve that rejects numerically singular systems.
pub fn lu_solve(a: Mat, b: &Vector, context: &'static str) -> Result<Vector> {
    let lu = a.lu();
    let u = lu.u();
    let diag = u.diagonal().map(f64::abs);
    let (lo, hi) = (diag.min(), diag.max());
    if hi == 0.0 || lo <= PIVOT_FLOOR * hi {
        return Err(Error::SingularSystem(context));
    }
    let x = lu.solve(b).ok_or(Error::SingularSystem(context))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem(context))
    }
}

/// Solves `A X + X B = C` for a general (non-symmetric) `X`.
pub fn solve_sylvester(a: &Mat, b: &Mat, c: &Mat) -> Result<Mat> {
    let (na, nb) = (a.nrows(), b.nrows());
    assert_eq!(c.shape(), (na, nb), "sylvester right-hand side shape");
    let dim = na * nb;
    let mut k = Mat::zeros(dim, dim);
    for j in 0..nb {
        for i in 0..na {
            let row = i + j * na;
            for l in 0..na {
                k[(row, l + j * na)] += a[(i, l)];
            }
            for l in 0..nb {
                k[(row, i + l * na)] += b[(l, j)];
            }
        }
    }
    let rhs = Vector::from_column_slice(c.as_slice());
    let x = lu_solve(k, &rhs, "Sylvester equation")?;
    Ok(Mat::from_column_slice(na, nb, x.as_slice()))
}

/// Solves `Aᵀ X + X A = -C` and returns the symmetric part of `X`.
pub fn solve_lyapunov(a: &Mat, c: &Mat) -> Result<Mat> {
    let x = solve_sylvester(&a.transpose(), a, &(-c))?;
    Ok(sym(&x))
}

pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    Ok(RealSchur::new(m)?.eigenvalues())
}

/// Largest real part; `-inf` for an empty spectrum.
pub fn spectral_abscissa(spectrum: &[Complex64]) -> f64 {
    spectrum.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn spectral_radius(spectrum: &[Complex64]) -> f64 {
    spectrum.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Sorts a spectrum by real part, then imaginary part.
pub fn sort_spectrum(spectrum: &mut [Complex64]) {
    spectrum.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
}

/// Pairs two spectra as multisets.
///
/// Returns `(pairs, distance)` where `pairs[i] = (i_left, i_right)` and
/// `distance` is the largest scaled mismatch `|a - b| / (1 + |a|)` over the
/// matching. Greedy nearest-neighbour matching in sorted order; `None` when
/// the multisets differ in size.
pub fn match_spectra(
    left: &[Complex64],
    right: &[Complex64],
) -> Option<(Vec<(usize, usize)>, f64)> {
    if left.len() != right.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..left.len()).collect();
    order.sort_by(|&a, &b| {
        left[a]
            .re
            .total_cmp(&left[b].re)
            .then(left[a].im.total_cmp(&left[b].im))
    });
    let mut used = vec![false; right.len()];
    let mut pairs = Vec::with_capacity(left.len());
    let mut worst: f64 = 0.0;
    for i in order {
        let (j, d) = right
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, r)| (j, (left[i] - r).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        used[j] = true;
        pairs.push((i, j));
        worst = worst.max(d / (1.0 + left[i].norm()));
    }
    Some((pairs, worst))
}

/// A diagonal block of a quasi-triangular matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchurBlock {
    pub start: usize,
    pub size: usize,
}

/// Real Schur form `M = Z T Zᵀ` with `T` quasi upper triangular, supporting
/// reordering of diagonal blocks.
///
/// Complex conjugate pairs occupy 2×2 blocks and always move together, so
/// every leading invariant subspace is real and closed under conjugation.
#[derive(Debug, Clone)]
pub struct RealSchur {
    t: Mat,
    z: Mat,
    blocks: Vec<SchurBlock>,
}

impl RealSchur {
    pub fn new(m: &Mat) -> Result<Self> {
        assert!(m.is_square(), "Schur decomposition needs a square matrix");
        let n = m.nrows();
        let (z, t) = nalgebra::linalg::Schur::try_new(m.clone(), f64::EPSILON, 100 * n.max(10))
            .ok_or(Error::SchurFailed)?
            .unpack();
        let mut out = Self {
            t,
            z,
            blocks: Vec::new(),
        };
        out.clean();
        Ok(out)
    }

    pub fn t(&self) -> &Mat {
        &self.t
    }

    pub fn z(&self) -> &Mat {
        &self.z
    }

    pub fn blocks(&self) -> &[SchurBlock] {
        &self.blocks
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.blocks
            .iter()
            .flat_map(|b| self.block_eigenvalues(*b))
            .collect()
    }

    pub fn block_eigenvalues(&self, b: SchurBlock) -> Vec<Complex64> {
        let i = b.start;
        if b.size == 1 {
            return vec![Complex64::new(self.t[(i, i)], 0.0)];
        }
        let (a, bb, c, d) = (
            self.t[(i, i)],
            self.t[(i, i + 1)],
            self.t[(i + 1, i)],
            self.t[(i + 1, i + 1)],
        );
        let (re, disc) = eig22(a, bb, c, d);
        if disc >= 0.0 {
            let s = disc.sqrt();
            vec![Complex64::new(re - s, 0.0), Complex64::new(re + s, 0.0)]
        } else {
            let s = (-disc).sqrt();
            vec![Complex64::new(re, s), Complex64::new(re, -s)]
        }
    }

    /// Leading `k` Schur vectors (basis of the leading invariant subspace).
    pub fn leading_subspace(&self, k: usize) -> Mat {
        self.z.columns(0, k).into_owned()
    }

    /// Moves the selected blocks to the top-left, keeping their relative
    /// order. `select` is indexed by block.
    pub fn reorder(&mut self, select: &[bool]) -> Result<()> {
        assert_eq!(select.len(), self.blocks.len());
        let mut layout: Vec<(usize, bool)> = self
            .blocks
            .iter()
            .zip(select)
            .map(|(b, &s)| (b.size, s))
            .collect();
        let mut insert = 0;
        for idx in 0..layout.len() {
            if !layout[idx].1 {
                continue;
            }
            let mut pos = idx;
            while pos > insert {
                let start: usize = layout[..pos - 1].iter().map(|b| b.0).sum();
                let (p, q) = (layout[pos - 1].0, layout[pos].0);
                self.swap_adjacent(start, p, q)?;
                layout.swap(pos - 1, pos);
                pos -= 1;
            }
            insert += 1;
        }
        self.rebuild_blocks();
        Ok(())
    }

    /// Exchanges the adjacent diagonal blocks of sizes `p` (upper) and `q`
    /// (lower) starting at row `j`, by the direct swapping method.
    fn swap_adjacent(&mut self, j: usize, p: usize, q: usize) -> Result<()> {
        let k = p + q;
        let t11 = self.t.view((j, j), (p, p)).into_owned();
        let t22 = self.t.view((j + p, j + p), (q, q)).into_owned();
        let t12 = self.t.view((j, j + p), (p, q)).into_owned();
        let local_norm = self.t.view((j, j), (k, k)).norm();
        let x = solve_sylvester(&t11, &(-&t22), &t12).map_err(|_| {
            Error::ReorderFailed("adjacent blocks share eigenvalues".to_string())
        })?;

        // columns of [-X; I] span the invariant subspace belonging to T22
        let mut c = Mat::zeros(k, k);
        c.view_mut((0, 0), (p, q)).copy_from(&(-&x));
        for i in 0..p {
            c[(i, q + i)] = 1.0;
        }
        for i in 0..q {
            c[(p + i, i)] = 1.0;
        }
        let qm = c.qr().q();

        let rows = self.t.rows(j, k).into_owned();
        self.t.rows_mut(j, k).copy_from(&(qm.transpose() * rows));
        let cols = self.t.columns(j, k).into_owned();
        self.t.columns_mut(j, k).copy_from(&(cols * &qm));
        let zc = self.z.columns(j, k).into_owned();
        self.z.columns_mut(j, k).copy_from(&(zc * &qm));

        let spill = self.t.view((j + q, j), (p, q)).norm();
        if spill > 1e-8 * (1.0 + local_norm) {
            return Err(Error::ReorderFailed(format!(
                "swap residual {spill:e} too large"
            )));
        }
        self.t.view_mut((j + q, j), (p, q)).fill(0.0);
        Ok(())
    }

    /// Zeroes negligible subdiagonal entries, splits 2×2 blocks that carry
    /// real eigenvalues and records the block layout.
    fn clean(&mut self) {
        let n = self.t.nrows();
        let scale = self.t.norm().max(f64::MIN_POSITIVE);
        for c in 0..n {
            for r in (c + 2)..n {
                self.t[(r, c)] = 0.0;
            }
        }
        for i in 0..n.saturating_sub(1) {
            let local = self.t[(i, i)].abs() + self.t[(i + 1, i + 1)].abs();
            let thresh = 4.0 * f64::EPSILON * if local > 0.0 { local } else { scale };
            if self.t[(i + 1, i)].abs() <= thresh {
                self.t[(i + 1, i)] = 0.0;
            }
        }
        let mut i = 0;
        while i + 1 < n {
            if self.t[(i + 1, i)] != 0.0 {
                if i + 2 < n && self.t[(i + 2, i + 1)] != 0.0 {
                    // two consecutive nonzero subdiagonals should not survive
                    // the QR iteration; drop the smaller one
                    if self.t[(i + 2, i + 1)].abs() < self.t[(i + 1, i)].abs() {
                        self.t[(i + 2, i + 1)] = 0.0;
                    }
                }
                let (a, b, c, d) = (
                    self.t[(i, i)],
                    self.t[(i, i + 1)],
                    self.t[(i + 1, i)],
                    self.t[(i + 1, i + 1)],
                );
                let (re, disc) = eig22(a, b, c, d);
                if disc >= 0.0 {
                    self.split_real_block(i, re - disc.sqrt());
                    i += 1;
                } else {
                    i += 2;
                }
            } else {
                i += 1;
            }
        }
        self.rebuild_blocks();
    }

    fn split_real_block(&mut self, i: usize, lambda: f64) {
        let (a, b, c, d) = (
            self.t[(i, i)],
            self.t[(i, i + 1)],
            self.t[(i + 1, i)],
            self.t[(i + 1, i + 1)],
        );
        let v1 = (b, lambda - a);
        let v2 = (lambda - d, c);
        let (x, y) = if v1.0.hypot(v1.1) >= v2.0.hypot(v2.1) {
            v1
        } else {
            v2
        };
        let r = x.hypot(y);
        if r == 0.0 {
            self.t[(i + 1, i)] = 0.0;
            return;
        }
        let (cs, sn) = (x / r, y / r);
        let g = Mat::from_row_slice(2, 2, &[cs, -sn, sn, cs]);
        let rows = self.t.rows(i, 2).into_owned();
        self.t.rows_mut(i, 2).copy_from(&(g.transpose() * rows));
        let cols = self.t.columns(i, 2).into_owned();
        self.t.columns_mut(i, 2).copy_from(&(cols * &g));
        let zc = self.z.columns(i, 2).into_owned();
        self.z.columns_mut(i, 2).copy_from(&(zc * &g));
        self.t[(i + 1, i)] = 0.0;
    }

    fn rebuild_blocks(&mut self) {
        let n = self.t.nrows();
        self.blocks.clear();
        let mut i = 0;
        while i < n {
            let size = if i + 1 < n && self.t[(i + 1, i)] != 0.0 {
                2
            } else {
                1
            };
            self.blocks.push(SchurBlock { start: i, size });
            i += size;
        }
    }
}

/// Returns `(mean, discriminant)` of the 2×2 eigenvalue problem; eigenvalues
/// are `mean ± sqrt(discriminant)`.
fn eig22(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let mean = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    (mean, half * half + b * c)
}

/// Stabilizing solution of `Aᵀ P + P A − P B Bᵀ P + Q = 0`.
#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: Mat,
    pub closed_loop: Mat,
    pub spectrum: Vec<Complex64>,
    pub residual: f64,
}

pub fn care_residual(a: &Mat, b: &Mat, q: &Mat, p: &Mat) -> Mat {
    a.transpose() * p + p * a - p * b * b.transpose() * p + q
}

/// Solves the continuous-time ARE with unit control weight through the
/// stable invariant subspace of the Hamiltonian, followed by Newton–Kleinman
/// polishing.
pub fn solve_care(a: &Mat, b: &Mat, q: &Mat, cond_max: f64, stab_rel: f64) -> Result<CareSolution> {
    let n = a.nrows();
    let bbt = b * b.transpose();
    let h = block2(a, &(-&bbt), &(-q), &(-a.transpose()));
    let h_norm = spectral_norm(&h);
    let margin = stab_rel * h_norm.max(1.0);
    let mut schur = RealSchur::new(&h)?;
    let select: Vec<bool> = schur
        .blocks()
        .iter()
        .map(|b| schur.block_eigenvalues(*b)[0].re < 0.0)
        .collect();
    let count: usize = schur
        .blocks()
        .iter()
        .zip(&select)
        .filter(|(_, s)| **s)
        .map(|(b, _)| b.size)
        .sum();
    if count != n {
        return Err(Error::NoStabilizingSolution(format!(
            "Hamiltonian has {count} stable eigenvalues, expected {n}"
        )));
    }
    schur.reorder(&select)?;
    let basis = schur.leading_subspace(n);
    let u = basis.rows(0, n).into_owned();
    let v = basis.rows(n, n).into_owned();
    if condition_number(&u) > cond_max {
        return Err(Error::NoStabilizingSolution(
            "stable subspace has a singular upper block".to_string(),
        ));
    }
    let u_inv = u
        .try_inverse()
        .ok_or_else(|| Error::NoStabilizingSolution("singular basis".to_string()))?;
    let mut p = sym(&(v * u_inv));

    let mut res = care_residual(a, b, q, &p);
    for _ in 0..4 {
        let acl = a - &bbt * &p;
        let Ok(delta) = solve_lyapunov(&acl, &res) else {
            break;
        };
        let candidate = sym(&(&p + delta));
        let cand_res = care_residual(a, b, q, &candidate);
        if cand_res.norm() < res.norm() {
            p = candidate;
            res = cand_res;
        } else {
            break;
        }
    }

    let closed_loop = a - &bbt * &p;
    let spectrum = eigenvalues(&closed_loop)?;
    let abscissa = spectral_abscissa(&spectrum);
    if abscissa >= -margin {
        return Err(Error::NoStabilizingSolution(format!(
            "closed loop spectral abscissa {abscissa:e}"
        )));
    }
    Ok(CareSolution {
        p,
        closed_loop,
        spectrum,
        residual: res.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(r, c, v)
    }

    #[test]
    fn sylvester_matches_definition() {
        let a = m(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let b = m(3, 3, &[4.0, 0.0, 1.0, 0.5, 5.0, 0.0, 0.0, 1.0, 6.0]);
        let c = m(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 1.0]);
        let x = solve_sylvester(&a, &b, &c).unwrap();
        assert!((&a * &x + &x * &b - &c).norm() < 1e-12);
    }

    #[test]
    fn sylvester_singular_is_rejected() {
        let a = m(1, 1, &[1.0]);
        let b = m(1, 1, &[-1.0]);
        assert!(matches!(
            solve_sylvester(&a, &b, &m(1, 1, &[1.0])),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn lyapunov_is_symmetric() {
        let a = m(2, 2, &[-1.0, 3.0, 0.0, -2.0]);
        let c = m(2, 2, &[2.0, 1.0, 1.0, 4.0]);
        let x = solve_lyapunov(&a, &c).unwrap();
        assert!((a.transpose() * &x + &x * &a + &c).norm() < 1e-12);
        assert_eq!(x, x.transpose());
    }

    #[test]
    fn reorder_moves_selected_blocks_up() {
        // one complex pair and two real eigenvalues
        let h = m(
            4,
            4,
            &[
                1.0, 2.0, 0.3, 0.1, -3.0, 1.0, 0.2, 0.0, 0.0, 0.5, -2.0, 0.7, 0.4, 0.0, 0.0, 4.0,
            ],
        );
        let mut schur = RealSchur::new(&h).unwrap();
        let before = {
            let mut e = schur.eigenvalues();
            sort_spectrum(&mut e);
            e
        };
        let select: Vec<bool> = schur
            .blocks()
            .iter()
            .map(|b| schur.block_eigenvalues(*b)[0].re < 0.0)
            .collect();
        schur.reorder(&select).unwrap();
        assert!(schur.eigenvalues()[0].re < 0.0);
        let recon = schur.z() * schur.t() * schur.z().transpose();
        assert!((recon - &h).norm() < 1e-12 * h.norm().max(1.0) * 10.0);
        let (_, d) = match_spectra(&before, &schur.eigenvalues()).unwrap();
        assert!(d < 1e-10);
        // leading column spans an invariant subspace
        let v = schur.leading_subspace(1);
        let hv = &h * &v;
        let lambda = schur.t()[(0, 0)];
        assert!((hv - v * lambda).norm() < 1e-10);
    }

    #[test]
    fn care_scalar_closed_form() {
        // a = 1, b = 1, q = 1: p = 1 + sqrt(2)
        let sol = solve_care(&m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), 1e10, 1e-9)
            .unwrap();
        assert!((sol.p[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-13);
        assert!((sol.spectrum[0].re + 2f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn care_double_integrator() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let q = Mat::identity(2, 2);
        let sol = solve_care(&a, &b, &q, 1e10, 1e-9).unwrap();
        // known solution [[sqrt3, 1], [1, sqrt3]]
        let s3 = 3f64.sqrt();
        assert!((sol.p - m(2, 2, &[s3, 1.0, 1.0, s3])).norm() < 1e-12);
    }

    #[test]
    fn care_imaginary_axis_fails() {
        // undamped oscillator with no control authority
        let a = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b = m(2, 1, &[0.0, 0.0]);
        let q = Mat::zeros(2, 2);
        assert!(solve_care(&a, &b, &q, 1e10, 1e-9).is_err());
    }

    #[test]
    fn spectra_matching() {
        let a = vec![Complex64::new(1.0, 0.0), Complex64::new(-2.0, 1.0)];
        let b = vec![Complex64::new(-2.0, 1.0), Complex64::new(1.0, 1e-12)];
        let (pairs, d) = match_spectra(&a, &b).unwrap();
        assert!(d < 1e-11);
        assert_eq!(pairs.len(), 2);
        assert!(match_spectra(&a, &b[..1]).is_none());
    }
}
