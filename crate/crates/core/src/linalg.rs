//! Dense linear-algebra helpers shared by the modeling and synthesis modules.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

/// Matrix exponential (Padé scaling and squaring).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return a.clone();
    }
    a.exp()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().fold(0.0_f64, |m, l| m.max(l.norm()))
}

/// Largest real part of the spectrum (negative for Hurwitz matrices).
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a)
        .iter()
        .fold(f64::NEG_INFINITY, |m, l| m.max(l.re))
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let e = SymmetricEigen::new(symmetrize(a));
    e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let e = SymmetricEigen::new(symmetrize(a));
    e.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Solves `P A + Aᵀ P = Q` by vectorization. Returns `None` when the
/// Kronecker operator is singular.
pub fn solve_continuous_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    // column-major vec: vec(P A) = (Aᵀ ⊗ I) vec(P), vec(Aᵀ P) = (I ⊗ Aᵀ) vec(P)
    let op = a.transpose().kronecker(&eye) + eye.kronecker(&a.transpose());
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = op.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some(symmetrize(&p))
}

/// Solves the Stein equation `P = Aᵀ P A + Q` for Schur-stable `A` by
/// squaring: `P = Σ (Aᵀ)^k Q A^k`.
pub fn solve_stein(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut ak = a.clone();
    let mut p = symmetrize(q);
    for _ in 0..64 {
        let incr = ak.transpose() * &p * &ak;
        let scale = max_abs(&p).max(f64::MIN_POSITIVE);
        p += &incr;
        if !p.iter().all(|v| v.is_finite()) {
            return None;
        }
        if max_abs(&incr) <= 1e-17 * scale {
            return Some(symmetrize(&p));
        }
        ak = &ak * &ak;
    }
    None
}

/// Orthonormal basis (as columns) of the row space of `m`, using a
/// relative singular-value threshold.
pub fn row_space_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    if cols == 0 || m.nrows() == 0 {
        return DMatrix::zeros(cols, 0);
    }
    // work on mᵀm to keep the right singular vectors
    let gram = m.transpose() * m;
    let e = SymmetricEigen::new(symmetrize(&gram));
    let top = e.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..cols)
        .filter(|&k| top > 0.0 && e.eigenvalues[k] > rel_tol * rel_tol * top)
        .collect();
    let mut basis = DMatrix::zeros(cols, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        basis.set_column(j, &e.eigenvectors.column(k));
    }
    basis
}
