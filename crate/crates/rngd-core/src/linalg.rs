//! Dense symmetric linear algebra kernels.
//!
//! Every geometry backend in this crate reduces to a handful of dense
//! operations on small symmetric matrices: eigendecompositions, Lyapunov
//! solves `XΣ + ΣX = U`, principal square roots, two-matrix geometric means
//! `A # B`, and truncated SVD. This module centralizes them so that numeric
//! policy (eigenvalue floors, symmetrization, tie-breaking) is decided in
//! exactly one place.
//!
//! Conventions:
//!
//! - All matrices are `f64` and column-major ([`nalgebra::DMatrix`]).
//! - Symmetric matrices are carried as [`SymMatrix`], which enforces
//!   *bit-exact* symmetry (`a[(i, j)] == a[(j, i)]` as floats) on
//!   construction by averaging mirrored entries.
//! - Eigenvalues are reported in non-increasing order; ties keep the order
//!   produced by the underlying solver.
//! - "SPD" checks use a relative floor: a symmetric matrix is treated as
//!   singular when its smallest eigenvalue is at or below
//!   [`SPD_FLOOR_REL`] times its largest.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative eigenvalue floor below which a symmetric matrix is treated as
/// singular: `λ_min <= SPD_FLOOR_REL * λ_max` fails the SPD check.
pub const SPD_FLOOR_REL: f64 = 1e-12;

/// Errors from the dense kernels.
#[derive(Debug, Error)]
pub enum LinalgError {
    /// A caller-supplied matrix or rank violated a precondition
    /// (non-square, non-finite entries, rank out of range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// An operation required a (strictly) positive-definite matrix but the
    /// argument is singular or indefinite relative to [`SPD_FLOOR_REL`].
    #[error("singular or indefinite matrix: {0}")]
    SingularMetric(String),
}

/// Result alias for this module.
pub type Result<T> = std::result::Result<T, LinalgError>;

/// A dense symmetric matrix with bit-exact symmetry.
///
/// Construction symmetrizes the input by setting both `(i, j)` and `(j, i)`
/// to the average of the two mirrored entries, so `m[(i, j)] == m[(j, i)]`
/// holds as an exact float comparison afterwards. The wrapper dereferences
/// to [`DMatrix`] for read access; mutation goes through
/// [`SymMatrix::new`] again so the invariant cannot be broken in place.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps a square matrix, enforcing bit-exact symmetry.
    ///
    /// # Errors
    ///
    /// [`LinalgError::InvalidInput`] if the matrix is not square or contains
    /// non-finite entries.
    pub fn new(mut a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(LinalgError::InvalidInput(format!(
                "symmetric matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::InvalidInput(
                "symmetric matrix contains non-finite entries".into(),
            ));
        }
        let n = a.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let m = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = m;
                a[(j, i)] = m;
            }
        }
        Ok(Self(a))
    }

    /// The `d x d` identity.
    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    /// The `d x d` zero matrix.
    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    /// Diagonal matrix from a vector.
    pub fn from_diagonal(diag: &DVector<f64>) -> Self {
        Self(DMatrix::from_diagonal(diag))
    }

    /// Side length.
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Borrows the underlying matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Consumes the wrapper, returning the underlying matrix.
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Wraps a matrix that is symmetric by construction (e.g. `P D Pᵀ`
    /// assembled entrywise). Debug builds verify the claim.
    pub(crate) fn new_unchecked(a: DMatrix<f64>) -> Self {
        debug_assert!(a.nrows() == a.ncols());
        debug_assert!((0..a.ncols()).all(|j| (0..a.nrows()).all(|i| {
            let (x, y) = (a[(i, j)], a[(j, i)]);
            x == y || (x - y).abs() <= 1e-10 * (1.0 + x.abs().max(y.abs()))
        })));
        let mut a = a;
        let n = a.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let m = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = m;
                a[(j, i)] = m;
            }
        }
        Self(a)
    }
}

impl std::ops::Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl AsRef<DMatrix<f64>> for SymMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Eigendecomposition `A = P Λ Pᵀ` of a symmetric matrix.
///
/// Invariants on construction via [`sym_eig`]:
///
/// - `values` are in non-increasing order (ties keep solver order);
/// - `vectors` has orthonormal columns (`‖PᵀP − I‖_max <= 1e-12`);
/// - `P Λ Pᵀ` reconstructs the input to `1e-10 * ‖A‖_F` in Frobenius norm.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Orthonormal eigenvectors, one per column, ordered like `values`.
    pub vectors: DMatrix<f64>,
    /// Eigenvalues in non-increasing order.
    pub values: DVector<f64>,
}

impl SpectralDecomposition {
    /// Largest eigenvalue.
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    /// Smallest eigenvalue.
    pub fn min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Reassembles `P Λ Pᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        self.apply_fn(|x| x)
    }

    /// Applies a scalar function to the spectrum: `P f(Λ) Pᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * f(self.values[j])
        });
        SymMatrix::new_unchecked(&scaled * self.vectors.transpose())
    }

    /// `true` when the spectrum passes the relative SPD floor:
    /// `λ_min > SPD_FLOOR_REL * λ_max` and `λ_max > 0`.
    pub fn is_spd(&self) -> bool {
        self.max() > 0.0 && self.min() > SPD_FLOOR_REL * self.max()
    }
}

/// Symmetric eigendecomposition with deterministic ordering.
///
/// Eigenvalues are sorted non-increasing; equal eigenvalues keep the relative
/// order in which the underlying solver produced them, so repeated calls on
/// the same matrix give bit-identical output.
///
/// # Errors
///
/// [`LinalgError::InvalidInput`] if the decomposition fails to converge
/// (non-finite input is already rejected by [`SymMatrix::new`]).
pub fn sym_eig(a: &SymMatrix) -> Result<SpectralDecomposition> {
    let d = a.dim();
    let eig = a
        .matrix()
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| LinalgError::InvalidInput("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("finite eigenvalues")
    });
    let values = DVector::from_fn(d, |k, _| eig.eigenvalues[order[k]]);
    let vectors = DMatrix::from_fn(d, d, |i, k| eig.eigenvectors[(i, order[k])]);
    Ok(SpectralDecomposition { vectors, values })
}

/// Solves the Lyapunov equation `X Σ + Σ X = U` for symmetric `X`.
///
/// `Σ` must be SPD. In the eigenbasis `Σ = P Λ Pᵀ` the solution is
/// `X̃_ij = Ũ_ij / (λ_i + λ_j)` with `Ũ = Pᵀ U P`, transformed back as
/// `X = P X̃ Pᵀ`. The residual `‖XΣ + ΣX − U‖_F` is at most
/// `1e-9 * ‖U‖_F` for well-conditioned `Σ`.
///
/// # Errors
///
/// [`LinalgError::SingularMetric`] if `Σ` fails the SPD floor.
pub fn lyapunov_solve(sigma: &SymMatrix, u: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(sigma)?;
    lyapunov_solve_with(&eig, u)
}

/// [`lyapunov_solve`] against a precomputed eigendecomposition of `Σ`.
///
/// Callers that solve many right-hand sides against the same `Σ` (vector
/// transport does) should decompose once and reuse it here.
///
/// # Errors
///
/// [`LinalgError::SingularMetric`] if the spectrum fails the SPD floor, or
/// [`LinalgError::InvalidInput`] on dimension mismatch.
pub fn lyapunov_solve_with(eig: &SpectralDecomposition, u: &SymMatrix) -> Result<SymMatrix> {
    // A symmetric right-hand side yields a symmetric solution.
    Ok(SymMatrix::new_unchecked(lyapunov_solve_general(
        eig,
        u.matrix(),
    )?))
}

/// [`lyapunov_solve_with`] for an arbitrary (not necessarily symmetric)
/// right-hand side. The entrywise eigenframe construction applies verbatim;
/// symmetric and skew-symmetric parts are solved independently, so the
/// solution inherits the symmetry structure of the input.
///
/// # Errors
///
/// Same conditions as [`lyapunov_solve_with`].
pub fn lyapunov_solve_general(
    eig: &SpectralDecomposition,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = eig.values.len();
    if u.nrows() != d || u.ncols() != d {
        return Err(LinalgError::InvalidInput(format!(
            "dimension mismatch: eigenframe is {d}-dimensional, rhs is {}x{}",
            u.nrows(),
            u.ncols()
        )));
    }
    if !eig.is_spd() {
        return Err(LinalgError::SingularMetric(format!(
            "Lyapunov solve needs SPD coefficient; spectrum range [{:.3e}, {:.3e}]",
            eig.min(),
            eig.max()
        )));
    }
    let p = &eig.vectors;
    let u_tilde = p.transpose() * u * p;
    let x_tilde = DMatrix::from_fn(d, d, |i, j| u_tilde[(i, j)] / (eig.values[i] + eig.values[j]));
    Ok(p * x_tilde * p.transpose())
}

/// Principal square root of an SPD matrix: `S` with `S S = A`, `S` SPD.
///
/// Satisfies `‖S S − A‖_F <= 1e-9 * ‖A‖_F` for well-conditioned input.
///
/// # Errors
///
/// [`LinalgError::SingularMetric`] if `A` fails the SPD floor.
pub fn sym_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    if !eig.is_spd() {
        return Err(LinalgError::SingularMetric(format!(
            "matrix square root needs SPD input; spectrum range [{:.3e}, {:.3e}]",
            eig.min(),
            eig.max()
        )));
    }
    Ok(eig.apply_fn(f64::sqrt))
}

/// Geometric mean `A # B` of two SPD matrices.
///
/// Computed as `A^{1/2} (A^{-1/2} B A^{-1/2})^{1/2} A^{1/2}`. The result is
/// the unique SPD solution `G` of the Riccati equation `G A⁻¹ G = B`; in
/// particular `A # A = A`, `I # B = B^{1/2}`, `A # B = B # A`, and for
/// commuting arguments `A # B = (A B)^{1/2}`.
///
/// # Errors
///
/// [`LinalgError::SingularMetric`] if either argument fails the SPD floor,
/// [`LinalgError::InvalidInput`] on dimension mismatch.
pub fn geometric_mean(a: &SymMatrix, b: &SymMatrix) -> Result<SymMatrix> {
    if a.dim() != b.dim() {
        return Err(LinalgError::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let eig_a = sym_eig(a)?;
    if !eig_a.is_spd() {
        return Err(LinalgError::SingularMetric(
            "geometric mean needs SPD first argument".into(),
        ));
    }
    let s = eig_a.apply_fn(f64::sqrt);
    let s_inv = eig_a.apply_fn(|x| 1.0 / x.sqrt());
    let inner = SymMatrix::new_unchecked(s_inv.matrix() * b.matrix() * s_inv.matrix());
    let m = sym_sqrt(&inner).map_err(|_| {
        LinalgError::SingularMetric("geometric mean needs SPD second argument".into())
    })?;
    Ok(SymMatrix::new_unchecked(
        s.matrix() * m.matrix() * s.matrix(),
    ))
}

/// Rank-`r` truncated singular value decomposition.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Left singular vectors, `m x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Leading singular values, non-increasing, length `r`.
    pub sigma: DVector<f64>,
    /// Right singular vectors, `n x r`, orthonormal columns.
    pub v: DMatrix<f64>,
    /// Set when the spectral gap at the truncation boundary is at most
    /// `1e-12 * σ_1`, i.e. the retained subspace is not numerically unique.
    pub degenerate: bool,
}

impl TruncatedSvd {
    /// Reassembles the rank-`r` approximation `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.u.nrows(), self.u.ncols(), |i, j| {
            self.u[(i, j)] * self.sigma[j]
        });
        &scaled * self.v.transpose()
    }
}

/// Best rank-`r` approximation of a dense matrix by truncated SVD.
///
/// Singular values are sorted non-increasing with deterministic tie-breaking
/// (solver order). The residual `‖A − U Σ Vᵀ‖_F` equals
/// `sqrt(σ_{r+1}² + ... + σ_min²)` of the full decomposition, so it is
/// non-increasing in `r`. When the gap `σ_r − σ_{r+1}` is at most
/// `1e-12 * σ_1` the [`TruncatedSvd::degenerate`] flag is set — the chosen
/// subspace is then solver-dependent even though the approximation error
/// is not.
///
/// # Errors
///
/// [`LinalgError::InvalidInput`] if `r == 0`, `r > min(m, n)`, the input is
/// empty or non-finite, or the decomposition fails to converge.
pub fn truncated_svd(a: &DMatrix<f64>, r: usize) -> Result<TruncatedSvd> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if r == 0 || r > k {
        return Err(LinalgError::InvalidInput(format!(
            "truncation rank {r} out of range for a {m}x{n} matrix"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::InvalidInput(
            "matrix contains non-finite entries".into(),
        ));
    }
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| LinalgError::InvalidInput("SVD did not converge".into()))?;
    let u_full = svd.u.expect("u requested");
    let vt_full = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .expect("finite singular values")
    });
    let sigma = DVector::from_fn(r, |i, _| svd.singular_values[order[i]]);
    let u = DMatrix::from_fn(m, r, |i, j| u_full[(i, order[j])]);
    let v = DMatrix::from_fn(n, r, |i, j| vt_full[(order[j], i)]);
    let sigma_1 = svd.singular_values[order[0]];
    let degenerate = if r < k {
        let gap = sigma[r - 1] - svd.singular_values[order[r]];
        gap <= 1e-12 * sigma_1
    } else {
        false
    };
    Ok(TruncatedSvd {
        u,
        sigma,
        v,
        degenerate,
    })
}

/// Result of [`clip_eigenvalues`]: the floored matrix plus how many
/// eigenvalues were raised to the floor.
#[derive(Debug, Clone)]
pub struct ClipOutcome {
    /// The re-assembled matrix with spectrum floored at the threshold.
    pub matrix: SymMatrix,
    /// Number of eigenvalues that were below the floor.
    pub clipped: usize,
    /// Smallest eigenvalue before flooring, so callers can distinguish a
    /// numerical graze from a genuine exit of the positive cone.
    pub min_eigenvalue: f64,
    /// Largest eigenvalue before flooring.
    pub max_eigenvalue: f64,
}

/// Floors the spectrum of a symmetric matrix at `floor`, keeping
/// eigenvectors fixed. Used as the positivity projection after covariance
/// retractions; callers surface [`ClipOutcome::clipped`] in diagnostics.
///
/// # Errors
///
/// [`LinalgError::InvalidInput`] if `floor` is not finite or the
/// eigendecomposition fails.
pub fn clip_eigenvalues(a: &SymMatrix, floor: f64) -> Result<ClipOutcome> {
    if !floor.is_finite() {
        return Err(LinalgError::InvalidInput("floor must be finite".into()));
    }
    let eig = sym_eig(a)?;
    let clipped = eig.values.iter().filter(|&&x| x < floor).count();
    if clipped == 0 {
        return Ok(ClipOutcome {
            matrix: a.clone(),
            clipped: 0,
            min_eigenvalue: eig.min(),
            max_eigenvalue: eig.max(),
        });
    }
    Ok(ClipOutcome {
        matrix: eig.apply_fn(|x| x.max(floor)),
        clipped,
        min_eigenvalue: eig.min(),
        max_eigenvalue: eig.max(),
    })
}

/// Symmetrizes a square matrix: `(A + Aᵀ) / 2`, returned as [`SymMatrix`].
///
/// # Errors
///
/// [`LinalgError::InvalidInput`] if the matrix is not square or non-finite.
pub fn sym_part(a: &DMatrix<f64>) -> Result<SymMatrix> {
    SymMatrix::new(a.clone())
}

/// Inverse of an SPD matrix through its eigendecomposition.
///
/// # Errors
///
/// [`LinalgError::SingularMetric`] if the argument fails the SPD floor.
pub fn spd_inverse(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    if !eig.is_spd() {
        return Err(LinalgError::SingularMetric(format!(
            "inverse needs SPD input; spectrum range [{:.3e}, {:.3e}]",
            eig.min(),
            eig.max()
        )));
    }
    Ok(eig.apply_fn(f64::recip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_sym(d: usize, rng: &mut StdRng) -> SymMatrix {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        SymMatrix::new(a).unwrap()
    }

    fn random_spd(d: usize, rng: &mut StdRng) -> SymMatrix {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        SymMatrix::new(&a * a.transpose() + DMatrix::identity(d, d) * 0.5).unwrap()
    }

    #[test]
    fn sym_matrix_is_bit_exact_symmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3000000000000001, 0.3, 2.0]);
        let s = SymMatrix::new(a).unwrap();
        assert_eq!(s[(0, 1)].to_bits(), s[(1, 0)].to_bits());
    }

    #[test]
    fn sym_matrix_rejects_non_square_and_non_finite() {
        assert!(matches!(
            SymMatrix::new(DMatrix::zeros(2, 3)),
            Err(LinalgError::InvalidInput(_))
        ));
        let mut a = DMatrix::identity(2, 2);
        a[(0, 0)] = f64::NAN;
        assert!(matches!(
            SymMatrix::new(a),
            Err(LinalgError::InvalidInput(_))
        ));
    }

    #[test]
    fn sym_eig_identity() {
        let eig = sym_eig(&SymMatrix::identity(3)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(eig.values[i], 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn sym_eig_orders_non_increasing() {
        let a = SymMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let eig = sym_eig(&a).unwrap();
        assert_eq!(eig.values.as_slice(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn sym_eig_reconstructs_and_is_orthonormal() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_sym(5, &mut rng);
            let eig = sym_eig(&a).unwrap();
            let gram = eig.vectors.transpose() * &eig.vectors;
            let max_dev = (gram - DMatrix::identity(5, 5)).abs().max();
            assert!(max_dev <= 1e-12, "orthonormality defect {max_dev:.3e}");
            let resid = (eig.reconstruct().matrix() - a.matrix()).norm();
            assert!(
                resid <= 1e-10 * a.matrix().norm().max(1.0),
                "reconstruction residual {resid:.3e}"
            );
        }
    }

    #[test]
    fn lyapunov_identity_coefficient_halves() {
        let u = SymMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let x = lyapunov_solve(&SymMatrix::identity(2), &u).unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(x[(1, 1)], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn lyapunov_diagonal_case() {
        // X diag(1,2) + diag(1,2) X = I  =>  X = diag(1/2, 1/4).
        let sigma = SymMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let x = lyapunov_solve(&sigma, &SymMatrix::identity(2)).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5, max_relative = 1e-12);
        assert_relative_eq!(x[(1, 1)], 0.25, max_relative = 1e-12);
        assert_relative_eq!(x[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_residual_small_on_random_spd() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let sigma = random_spd(6, &mut rng);
            let u = random_sym(6, &mut rng);
            let x = lyapunov_solve(&sigma, &u).unwrap();
            let resid =
                (x.matrix() * sigma.matrix() + sigma.matrix() * x.matrix() - u.matrix()).norm();
            assert!(
                resid <= 1e-9 * u.matrix().norm().max(1.0),
                "residual {resid:.3e}"
            );
        }
    }

    #[test]
    fn lyapunov_rejects_singular_coefficient() {
        let sigma = SymMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            lyapunov_solve(&sigma, &SymMatrix::identity(2)),
            Err(LinalgError::SingularMetric(_))
        ));
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_spd(5, &mut rng);
            let s = sym_sqrt(&a).unwrap();
            let resid = (s.matrix() * s.matrix() - a.matrix()).norm();
            assert!(resid <= 1e-9 * a.matrix().norm(), "residual {resid:.3e}");
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let a = SymMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sym_sqrt(&a).unwrap();
        assert_relative_eq!(s[(0, 0)], 2.0, max_relative = 1e-12);
        assert_relative_eq!(s[(1, 1)], 3.0, max_relative = 1e-12);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let a = SymMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(sym_sqrt(&a), Err(LinalgError::SingularMetric(_))));
    }

    #[test]
    fn geometric_mean_fixed_points() {
        let mut rng = StdRng::seed_from_u64(17);
        let a = random_spd(4, &mut rng);
        // A # A = A.
        let g = geometric_mean(&a, &a).unwrap();
        assert!((g.matrix() - a.matrix()).norm() <= 1e-9 * a.matrix().norm());
        // I # B = sqrt(B).
        let g = geometric_mean(&SymMatrix::identity(4), &a).unwrap();
        let s = sym_sqrt(&a).unwrap();
        assert!((g.matrix() - s.matrix()).norm() <= 1e-9 * s.matrix().norm());
    }

    #[test]
    fn geometric_mean_commuting_is_sqrt_of_product() {
        let a = SymMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0]));
        let b = SymMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 16.0]));
        let g = geometric_mean(&a, &b).unwrap();
        for (i, want) in [2.0, 2.0, 12.0].iter().enumerate() {
            assert_relative_eq!(g[(i, i)], *want, max_relative = 1e-10);
        }
    }

    #[test]
    fn geometric_mean_is_symmetric_in_arguments_and_solves_riccati() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..10 {
            let a = random_spd(4, &mut rng);
            let b = random_spd(4, &mut rng);
            let g_ab = geometric_mean(&a, &b).unwrap();
            let g_ba = geometric_mean(&b, &a).unwrap();
            let scale = g_ab.matrix().norm();
            assert!((g_ab.matrix() - g_ba.matrix()).norm() <= 1e-9 * scale);
            // G A⁻¹ G = B characterizes the geometric mean.
            let a_inv = a.matrix().clone().try_inverse().unwrap();
            let resid = (g_ab.matrix() * a_inv * g_ab.matrix() - b.matrix()).norm();
            assert!(resid <= 1e-8 * b.matrix().norm(), "Riccati residual {resid:.3e}");
        }
    }

    #[test]
    fn truncated_svd_recovers_exact_low_rank() {
        let mut rng = StdRng::seed_from_u64(23);
        let u = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-1.0..1.0));
        let v = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let a = &u * v.transpose();
        let t = truncated_svd(&a, 2).unwrap();
        assert!((t.reconstruct() - &a).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn truncated_svd_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let t = truncated_svd(&a, 2).unwrap();
        assert_relative_eq!(t.sigma[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(t.sigma[1], 2.0, max_relative = 1e-12);
        assert!(!t.degenerate);
        let resid = (t.reconstruct() - &a).norm();
        assert_relative_eq!(resid, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn truncated_svd_residual_matches_tail_singular_values() {
        let mut rng = StdRng::seed_from_u64(29);
        let a = DMatrix::from_fn(8, 5, |_, _| rng.gen_range(-1.0..1.0));
        let full = truncated_svd(&a, 5).unwrap();
        let t = truncated_svd(&a, 3).unwrap();
        let resid = (t.reconstruct() - &a).norm();
        let want = (full.sigma[3].powi(2) + full.sigma[4].powi(2)).sqrt();
        assert_relative_eq!(resid, want, max_relative = 1e-9);
    }

    #[test]
    fn truncated_svd_flags_degenerate_boundary() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 2.0]));
        assert!(truncated_svd(&a, 2).unwrap().degenerate);
        assert!(!truncated_svd(&a, 1).unwrap().degenerate);
    }

    #[test]
    fn truncated_svd_rejects_bad_rank() {
        let a = DMatrix::identity(3, 3);
        assert!(matches!(
            truncated_svd(&a, 4),
            Err(LinalgError::InvalidInput(_))
        ));
        assert!(matches!(
            truncated_svd(&a, 0),
            Err(LinalgError::InvalidInput(_))
        ));
    }

    #[test]
    fn clip_raises_small_eigenvalues_only() {
        let a = SymMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1e-12, -0.5]));
        let out = clip_eigenvalues(&a, 1e-8).unwrap();
        assert_eq!(out.clipped, 2);
        let eig = sym_eig(&out.matrix).unwrap();
        assert!(eig.min() >= 1e-8 * (1.0 - 1e-12));
        assert_relative_eq!(eig.max(), 2.0, max_relative = 1e-10);
        // Already-positive input passes through untouched.
        let b = SymMatrix::identity(3);
        let out = clip_eigenvalues(&b, 1e-8).unwrap();
        assert_eq!(out.clipped, 0);
        assert_eq!(out.matrix.matrix(), b.matrix());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn prop_eig_reconstructs(seed in 0u64..1000, d in 2usize..7) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = random_sym(d, &mut rng);
            let eig = sym_eig(&a).unwrap();
            let resid = (eig.reconstruct().matrix() - a.matrix()).norm();
            prop_assert!(resid <= 1e-10 * a.matrix().norm().max(1.0));
            for i in 1..d {
                prop_assert!(eig.values[i - 1] >= eig.values[i]);
            }
        }

        #[test]
        fn prop_lyapunov_residual(seed in 0u64..1000, d in 2usize..7) {
            let mut rng = StdRng::seed_from_u64(seed);
            let sigma = random_spd(d, &mut rng);
            let u = random_sym(d, &mut rng);
            let x = lyapunov_solve(&sigma, &u).unwrap();
            let resid = (x.matrix() * sigma.matrix() + sigma.matrix() * x.matrix()
                - u.matrix())
            .norm();
            prop_assert!(resid <= 1e-9 * u.matrix().norm().max(1.0));
        }

        #[test]
        fn prop_truncation_residual_monotone(seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
            let mut prev = f64::INFINITY;
            for r in 1..=4 {
                let t = truncated_svd(&a, r).unwrap();
                let resid = (t.reconstruct() - &a).norm();
                prop_assert!(resid <= prev + 1e-12);
                prev = resid;
            }
        }
    }
}
