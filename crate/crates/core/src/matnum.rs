//! Dense linear-algebra kernels shared by the rest of the crate.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Complex arithmetic only
//! shows up inside eigenvalue computations and transfer-function evaluation;
//! the matrices handed back to callers are always real.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatnumError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pair (C, A) is not observable: observability rank {rank} < {n}")]
    Unobservable { rank: usize, n: usize },
    #[error("requested pole set is not closed under complex conjugation")]
    NotConjugateClosed,
    #[error("requested {requested} poles for a system of order {order}")]
    PoleCount { requested: usize, order: usize },
    #[error("pole placement failed: {0}")]
    Placement(String),
}

pub type Result<T> = std::result::Result<T, MatnumError>;

// Fixed seed for the Sylvester right-hand sides so gains are reproducible.
const SYLVESTER_SEED: u64 = 0x5117_e57e;

fn ensure_square(a: &Matrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(MatnumError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Matrix exponential `e^{A t}`.
pub fn expm(a: &Matrix, t: f64) -> Result<Matrix> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    if t == 0.0 {
        return Ok(Matrix::identity(n, n));
    }
    Ok((a * t).exp())
}

/// Eigenvalues with multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<C64>,
    pub multiplicities: Vec<usize>,
}

impl Spectrum {
    /// Groups a flat list of values, merging entries closer than `tol`
    /// (relative to `max(1, |value|)`).
    pub fn from_values(values: &[C64], tol: f64) -> Self {
        let mut eigenvalues: Vec<C64> = Vec::new();
        let mut multiplicities: Vec<usize> = Vec::new();
        for &v in values {
            let hit = eigenvalues
                .iter()
                .position(|e| (e - v).norm() <= tol * e.norm().max(1.0));
            match hit {
                Some(k) => multiplicities[k] += 1,
                None => {
                    eigenvalues.push(v);
                    multiplicities.push(1);
                }
            }
        }
        Spectrum {
            eigenvalues,
            multiplicities,
        }
    }

    pub fn from_real(values: &[f64]) -> Self {
        let vals: Vec<C64> = values.iter().map(|&r| C64::new(r, 0.0)).collect();
        Self::from_values(&vals, 0.0)
    }

    /// Flat list with every eigenvalue repeated by its multiplicity.
    pub fn values(&self) -> Vec<C64> {
        self.eigenvalues
            .iter()
            .zip(&self.multiplicities)
            .flat_map(|(&e, &m)| std::iter::repeat_n(e, m))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.multiplicities.iter().sum()
    }

    pub fn is_conjugate_closed(&self, tol: f64) -> bool {
        let vals = self.values();
        let mut used = vec![false; vals.len()];
        for i in 0..vals.len() {
            if used[i] {
                continue;
            }
            let v = vals[i];
            if v.im.abs() <= tol * v.norm().max(1.0) {
                used[i] = true;
                continue;
            }
            let partner = (0..vals.len())
                .find(|&j| j != i && !used[j] && (vals[j] - v.conj()).norm() <= tol * v.norm().max(1.0));
            match partner {
                Some(j) => {
                    used[i] = true;
                    used[j] = true;
                }
                None => return false,
            }
        }
        true
    }

    /// Whether `z` coincides with an eigenvalue (relative tolerance).
    pub fn contains(&self, z: C64, tol: f64) -> bool {
        self.eigenvalues
            .iter()
            .any(|e| (e - z).norm() <= tol * e.norm().max(1.0))
    }
}

/// Largest distance between two multisets of complex numbers after a greedy
/// nearest-neighbour pairing. Returns infinity when the sizes differ.
pub fn spectrum_distance(a: &[C64], b: &[C64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (j, y) in b.iter().enumerate() {
            if !used[j] && (x - y).norm() < best_d {
                best_d = (x - y).norm();
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[j] = true;
        }
        worst = worst.max(best_d);
    }
    worst
}

pub fn eigenvalues(a: &Matrix) -> Result<Spectrum> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: vec![],
            multiplicities: vec![],
        });
    }
    let vals: Vec<C64> = a.complex_eigenvalues().iter().copied().collect();
    Ok(Spectrum::from_values(&vals, 1e-9))
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return vec![];
    }
    let sv = m.clone().svd(false, false).singular_values;
    let mut v: Vec<f64> = sv.iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

pub fn default_rank_tol(m: &Matrix) -> f64 {
    let smax = singular_values(m).first().copied().unwrap_or(0.0);
    m.nrows().max(m.ncols()) as f64 * smax * f64::EPSILON
}

/// Number of singular values above `tol` (default: `max(r,c)·σ_max·ε`).
pub fn numerical_rank(m: &Matrix, tol: Option<f64>) -> usize {
    let tol = tol.unwrap_or_else(|| default_rank_tol(m));
    singular_values(m).into_iter().filter(|&s| s > tol).count()
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Full right-singular basis `V` (cols × cols) and singular values padded
/// with zeros to length `cols`.
fn full_right_svd(m: &Matrix) -> (Matrix, Vec<f64>) {
    let cols = m.ncols();
    // Pad with zero rows so the thin SVD returns a complete V.
    let rows = m.nrows().max(cols);
    let mut padded = Matrix::zeros(rows, cols);
    padded.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
    });
    let mut v = Matrix::zeros(cols, cols);
    let mut s = Vec::with_capacity(cols);
    for (k, &i) in order.iter().enumerate() {
        v.set_column(k, &v_t.row(i).transpose());
        s.push(svd.singular_values[i]);
    }
    (v, s)
}

/// Orthonormal basis of `ker(M)` as columns; width 0 when the kernel is trivial.
pub fn kernel_basis(m: &Matrix) -> Matrix {
    kernel_basis_tol(m, None)
}

pub fn kernel_basis_tol(m: &Matrix, tol: Option<f64>) -> Matrix {
    let cols = m.ncols();
    if cols == 0 {
        return Matrix::zeros(0, 0);
    }
    if m.nrows() == 0 {
        return Matrix::identity(cols, cols);
    }
    let tol = tol.unwrap_or_else(|| default_rank_tol(m));
    let (v, s) = full_right_svd(m);
    let rank = s.iter().filter(|&&x| x > tol).count();
    v.columns(rank, cols - rank).into_owned()
}

/// Orthonormal basis of the orthogonal complement of `Range(M)`.
pub fn orthonormal_complement(m: &Matrix) -> Matrix {
    let n = m.nrows();
    if m.ncols() == 0 {
        return Matrix::identity(n, n);
    }
    kernel_basis(&m.transpose())
}

/// Minimum-norm least-squares solution of `A x = b` through an SVD, dropping
/// singular values below `rcond·σ_max`. Also returns the effective rank.
pub fn lstsq_min_norm(a: &Matrix, b: &Matrix, rcond: f64) -> (Matrix, usize) {
    if a.ncols() == 0 {
        return (Matrix::zeros(0, b.ncols()), 0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = rcond * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff && s > 0.0).count();
    if rank == 0 {
        return (Matrix::zeros(a.ncols(), b.ncols()), 0);
    }
    let x = svd
        .solve(b, cutoff.max(f64::MIN_POSITIVE))
        .expect("U and V^T were computed");
    (x, rank)
}

/// Stacked observability matrix `[C; CA; …; CA^{n-1}]`.
pub fn observability_stack(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a)?;
    if c.ncols() != n {
        return Err(MatnumError::Dimension(format!(
            "C has {} columns but A is {n}x{n}",
            c.ncols()
        )));
    }
    let p = c.nrows();
    let mut w = Matrix::zeros(p * n, n);
    let mut block = c.clone();
    for k in 0..n {
        w.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    Ok(w)
}

/// Real monic polynomial coefficients (descending powers, leading 1) with the
/// given roots. Imaginary residue from rounding is dropped.
pub fn poly_from_roots(roots: &[C64]) -> Vec<f64> {
    let mut coeffs = vec![C64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![C64::new(0.0, 0.0); coeffs.len() + 1];
        for (k, &c) in coeffs.iter().enumerate() {
            next[k] += c;
            next[k + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

/// Roots of a real polynomial (descending coefficients) via the companion matrix.
pub fn poly_roots(coeffs: &[f64]) -> Vec<C64> {
    let first = coeffs.iter().position(|&c| c != 0.0);
    let Some(first) = first else { return vec![] };
    let c = &coeffs[first..];
    let deg = c.len() - 1;
    if deg == 0 {
        return vec![];
    }
    let mut comp = Matrix::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    comp.complex_eigenvalues().iter().copied().collect()
}

/// Real block-diagonal matrix whose eigenvalues are `poles`.
/// Complex pairs become `[[a, b], [-b, a]]` blocks.
fn real_pole_matrix(poles: &[C64]) -> Result<Matrix> {
    let n = poles.len();
    let mut lam = Matrix::zeros(n, n);
    let mut used = vec![false; n];
    let mut k = 0;
    for i in 0..n {
        if used[i] {
            continue;
        }
        let p = poles[i];
        used[i] = true;
        if p.im.abs() <= 1e-12 * p.norm().max(1.0) {
            lam[(k, k)] = p.re;
            k += 1;
        } else {
            let j = (0..n)
                .find(|&j| !used[j] && (poles[j] - p.conj()).norm() <= 1e-9 * p.norm().max(1.0))
                .ok_or(MatnumError::NotConjugateClosed)?;
            used[j] = true;
            let (a, b) = (p.re, p.im.abs());
            lam[(k, k)] = a;
            lam[(k, k + 1)] = b;
            lam[(k + 1, k)] = -b;
            lam[(k + 1, k + 1)] = a;
            k += 2;
        }
    }
    Ok(lam)
}

fn cond(m: &Matrix) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Observer gain `L` such that `A − L·C` has the requested eigenvalues.
///
/// Works on the dual controller problem `(Aᵀ, Cᵀ)`: a single output uses
/// Ackermann's formula, several outputs use the Sylvester-equation method
/// with seeded random right-hand sides, keeping the best-conditioned solve.
/// A fully sensed system (invertible `C`) with real distinct eigenvalues
/// gets the eigenvector-preserving shift instead.
pub fn place_observer_gain(a: &Matrix, c: &Matrix, poles: &Spectrum) -> Result<Matrix> {
    let n = ensure_square(a)?;
    if c.ncols() != n {
        return Err(MatnumError::Dimension(format!(
            "C has {} columns but A is {n}x{n}",
            c.ncols()
        )));
    }
    if poles.dim() != n {
        return Err(MatnumError::PoleCount {
            requested: poles.dim(),
            order: n,
        });
    }
    if !poles.is_conjugate_closed(1e-9) {
        return Err(MatnumError::NotConjugateClosed);
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, c.nrows()));
    }
    let w = observability_stack(a, c)?;
    let rank = numerical_rank(&w, None);
    if rank < n {
        return Err(MatnumError::Unobservable { rank, n });
    }
    let target = poles.values();
    let gain = if c.nrows() == 1 {
        ackermann_observer(a, c, &target)?
    } else if let Some(l) = modal_shift_observer(a, c, &target) {
        l
    } else {
        sylvester_observer(a, c, &target)?
    };
    let achieved = eigenvalues(&(a - &gain * c))?.values();
    let miss = spectrum_distance(&achieved, &target);
    let scale = target.iter().map(|z| z.norm()).fold(1.0, f64::max);
    if !(miss <= 1e-6 * scale) {
        return Err(MatnumError::Placement(format!(
            "closed-loop spectrum misses request by {miss:.3e}"
        )));
    }
    Ok(gain)
}

fn ackermann_observer(a: &Matrix, c: &Matrix, target: &[C64]) -> Result<Matrix> {
    let n = a.nrows();
    let coeffs = poly_from_roots(target);
    // φ(A) = A^n + c1 A^{n-1} + … + cn I via Horner.
    let mut phi = Matrix::identity(n, n);
    for &ck in &coeffs[1..] {
        phi = &phi * a + Matrix::identity(n, n) * ck;
    }
    let w = observability_stack(a, c)?;
    let mut e_n = Matrix::zeros(n, 1);
    e_n[(n - 1, 0)] = 1.0;
    let q = w
        .lu()
        .solve(&e_n)
        .ok_or_else(|| MatnumError::Placement("singular observability matrix".into()))?;
    Ok(phi * q)
}

// Full-rank square C with real, distinct eigenvalues on both sides: shift
// each eigenvalue of A to the target of the same rank order, keeping the
// eigenvectors.
fn modal_shift_observer(a: &Matrix, c: &Matrix, target: &[C64]) -> Option<Matrix> {
    let n = a.nrows();
    if c.nrows() != n || target.iter().any(|z| z.im != 0.0) {
        return None;
    }
    let c_inv = c.clone().try_inverse()?;
    if cond(c) > 1e12 {
        return None;
    }
    let spec = eigenvalues(a).ok()?;
    if spec.multiplicities.iter().any(|&m| m != 1) || spec.eigenvalues.iter().any(|z| z.im != 0.0) {
        return None;
    }
    let mut own: Vec<f64> = spec.eigenvalues.iter().map(|z| z.re).collect();
    own.sort_by(|x, y| y.total_cmp(x));
    let mut want: Vec<f64> = target.iter().map(|z| z.re).collect();
    want.sort_by(|x, y| y.total_cmp(x));
    let mut v = Matrix::zeros(n, n);
    for (j, &lam) in own.iter().enumerate() {
        let k = kernel_basis(&(a - Matrix::identity(n, n) * lam));
        if k.ncols() != 1 {
            return None;
        }
        v.set_column(j, &k.column(0));
    }
    if cond(&v) > 1e8 {
        return None;
    }
    let v_inv = v.clone().try_inverse()?;
    let shifted = &v * Matrix::from_diagonal(&Vector::from_vec(want)) * v_inv;
    Some((a - shifted) * c_inv)
}

fn sylvester_observer(a: &Matrix, c: &Matrix, target: &[C64]) -> Result<Matrix> {
    let n = a.nrows();
    let p = c.nrows();
    let lam = real_pole_matrix(target)?;
    let at = a.transpose();
    let ct = c.transpose();
    // (I ⊗ Aᵀ − Λᵀ ⊗ I) vec(X) = vec(Cᵀ G)
    let eye = Matrix::identity(n, n);
    let kron = eye.kronecker(&at) - lam.transpose().kronecker(&eye);
    let lu = kron.lu();
    let mut rng = ChaCha8Rng::seed_from_u64(SYLVESTER_SEED);
    let mut best: Option<(f64, Matrix)> = None;
    for _ in 0..24 {
        let g = Matrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let rhs = &ct * &g;
        let rhs_vec = Vector::from_column_slice(rhs.as_slice());
        let Some(xv) = lu.solve(&rhs_vec) else { continue };
        let x = Matrix::from_column_slice(n, n, xv.as_slice());
        let kx = cond(&x);
        if !kx.is_finite() || kx > 1e12 {
            continue;
        }
        let Some(x_inv) = x.clone().try_inverse() else { continue };
        let k = &g * x_inv;
        if best.as_ref().is_none_or(|(bc, _)| kx < *bc) {
            best = Some((kx, k.transpose()));
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| {
        MatnumError::Placement("Sylvester solve singular for every right-hand side".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_pole_matrix_builds_rotation_blocks() {
        let lam = real_pole_matrix(&[C64::new(-1.0, 2.0), C64::new(-3.0, 0.0), C64::new(-1.0, -2.0)]).unwrap();
        let want = Matrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -2.0, -1.0, 0.0, 0.0, 0.0, -3.0]);
        assert_eq!(lam, want);
    }

    #[test]
    fn real_pole_matrix_needs_conjugates() {
        let r = real_pole_matrix(&[C64::new(-1.0, 2.0), C64::new(-1.0, 3.0)]);
        assert!(matches!(r, Err(MatnumError::NotConjugateClosed)));
    }

    #[test]
    fn cond_of_singular_matrix_is_infinite() {
        assert_eq!(cond(&Matrix::zeros(2, 2)), f64::INFINITY);
        assert!((cond(&Matrix::from_diagonal(&Vector::from_row_slice(&[4.0, 0.5]))) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn modal_shift_declines_complex_spectrum() {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let c = Matrix::identity(2, 2);
        assert!(modal_shift_observer(&a, &c, &[C64::new(-1.0, 0.0), C64::new(-2.0, 0.0)]).is_none());
    }

    #[test]
    fn ensure_square_reports_shape() {
        match ensure_square(&Matrix::zeros(2, 3)) {
            Err(MatnumError::NotSquare { rows: 2, cols: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
