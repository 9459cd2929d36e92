//! Gaussian distributions under the Bures–Wasserstein (BW) geometry.
//!
//! A point is a full-rank Gaussian `N(m, Σ)`. The covariance factor carries
//! the optimal-transport (2-Wasserstein) metric on SPD matrices; the mean
//! factor is flat. Tangent vectors use the *Lyapunov chart*: a tangent is a
//! pair `(u, X)` with `u ∈ ℝ^d` and `X` symmetric, flattened as
//! `[u | vec(X)]` (column-major), where `X` relates to the ambient
//! covariance velocity `U` through the Lyapunov equation `XΣ + ΣX = U`.
//!
//! In this chart, writing `A # B` for the SPD geometric mean:
//!
//! - metric: `⟨(u₁,X₁),(u₂,X₂)⟩_{(m,Σ)} = u₁ᵀu₂ + tr(X₁ Σ X₂)`;
//! - exponential: `Exp_{(m,Σ)}(u, X) = (m + u, (I+X) Σ (I+X))`, defined for
//!   `X ≻ -I`;
//! - logarithm: `Log_{(m,Σ₁)}(m₂, Σ₂) = (m₂ − m₁, Σ₁⁻¹ # Σ₂ − I)`;
//! - transport from `Σ₁` to `Σ₂`: the mean block is carried unchanged and
//!   `X ↦ L_{Σ₂}(A Σ₁ X + X Σ₁ A)` with `A = Σ₁⁻¹ # Σ₂`, `L` the Lyapunov
//!   solution operator. Its metric adjoint is the *reverse* transport
//!   (`T*_{1→2} = T_{2→1}`), which this module uses directly; the transport
//!   is not an isometry.
//!
//! Two [`Manifold`] backends share the [`GaussPoint`] representation:
//!
//! - [`BwGaussian`] — the geometry above; its retraction is the exact
//!   exponential with positive-but-tiny eigenvalues floored at
//!   [`COVARIANCE_EIG_FLOOR`] and negative ones rejected as recoverable
//!   [`GeometryError::RankCollapse`] so step control can shrink the move.
//! - [`GaussEuclidean`] — the flat `(m, Σ)` chart: identity metric,
//!   additive retraction with the same eigenvalue policy, identity
//!   transport. This is the reference geometry for flat-chart optimizer
//!   baselines and Fisher-consistency checks.
//!
//! The module also provides the Gaussian log-density score in both charts,
//! the Fisher quadratic form, exact natural-gradient directions, KL
//! divergence, and the closed-form 2-Wasserstein distance.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{
    clip_eigenvalues, geometric_mean, lyapunov_solve_general, lyapunov_solve_with, spd_inverse,
    sym_eig, sym_sqrt,
    SpectralDecomposition, SymMatrix,
};
use crate::manifold::{
    GeometryError, Manifold, Result, RetractDiag, Tangent, TransportMaps,
};

/// Eigenvalue floor applied to covariance matrices after retraction steps.
/// Clips are counted in [`RetractDiag::clipped_eigenvalues`].
pub const COVARIANCE_EIG_FLOOR: f64 = 1e-8;

/// Margin for the exponential-map domain check: `Exp` requires the smallest
/// eigenvalue of `X` to exceed `-1 + EXP_DOMAIN_MARGIN`.
pub const EXP_DOMAIN_MARGIN: f64 = 1e-10;

/// A full-rank Gaussian distribution `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussPoint {
    /// Mean vector.
    pub mean: DVector<f64>,
    /// SPD covariance.
    pub cov: SymMatrix,
}

impl GaussPoint {
    /// Builds a Gaussian point, verifying that the covariance is SPD.
    ///
    /// # Errors
    ///
    /// [`GeometryError::SingularMetric`] if `cov` fails the SPD floor;
    /// [`GeometryError::DimensionMismatch`] if sizes disagree.
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: mean.len(),
                got: cov.dim(),
            });
        }
        let eig = sym_eig(&cov)?;
        if !eig.is_spd() {
            return Err(GeometryError::SingularMetric(format!(
                "covariance must be SPD; spectrum range [{:.3e}, {:.3e}]",
                eig.min(),
                eig.max()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// The standard Gaussian `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: SymMatrix::identity(d),
        }
    }

    /// Dimension of the underlying space.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws one sample `y ~ N(mean, cov)`.
    ///
    /// # Errors
    ///
    /// [`GeometryError::SingularMetric`] if the covariance square root
    /// fails.
    pub fn sample(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let s = sym_sqrt(&self.cov)?;
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        Ok(&self.mean + s.matrix() * z)
    }

    /// Draws `n` samples, one per column.
    ///
    /// # Errors
    ///
    /// Same as [`GaussPoint::sample`].
    pub fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let s = sym_sqrt(&self.cov)?;
        let d = self.dim();
        let z = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(rng));
        let mut out = s.matrix() * z;
        for j in 0..n {
            let mut col = out.column_mut(j);
            col += &self.mean;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Chart packing
// ---------------------------------------------------------------------------

/// Packs a Gaussian-chart tangent `(u, X)` into the flat layout
/// `[u | vec(X)]` (column-major `X`).
pub fn gauss_chart_pack(u: &DVector<f64>, x: &DMatrix<f64>) -> Tangent {
    let d = u.len();
    debug_assert_eq!(x.nrows(), d);
    debug_assert_eq!(x.ncols(), d);
    let mut t = DVector::zeros(d + d * d);
    t.rows_mut(0, d).copy_from(u);
    t.rows_mut(d, d * d).copy_from_slice(x.as_slice());
    t
}

/// Splits a flat Gaussian-chart tangent back into `(u, X)`.
pub fn gauss_chart_unpack(d: usize, t: &Tangent) -> (DVector<f64>, DMatrix<f64>) {
    debug_assert_eq!(t.len(), d + d * d);
    let u = DVector::from(t.rows(0, d).clone_owned());
    let x = DMatrix::from_column_slice(d, d, t.rows(d, d * d).as_slice());
    (u, x)
}

// ---------------------------------------------------------------------------
// Closed-form BW operations
// ---------------------------------------------------------------------------

/// Exact BW exponential: `(m + u, (I+X) Σ (I+X))`.
///
/// # Errors
///
/// [`GeometryError::ExpDomain`] when the smallest eigenvalue of `X` is at or
/// below `-1 + EXP_DOMAIN_MARGIN` (the image would leave the SPD cone).
pub fn bw_exp(p: &GaussPoint, u: &DVector<f64>, x: &SymMatrix) -> Result<GaussPoint> {
    let d = p.dim();
    if u.len() != d || x.dim() != d {
        return Err(GeometryError::DimensionMismatch {
            expected: d,
            got: u.len().max(x.dim()),
        });
    }
    let eig = sym_eig(x)?;
    if eig.min() <= -1.0 + EXP_DOMAIN_MARGIN {
        return Err(GeometryError::ExpDomain { min_eig: eig.min() });
    }
    let ipx = DMatrix::identity(d, d) + x.matrix();
    let cov = SymMatrix::new_unchecked(&ipx * p.cov.matrix() * &ipx);
    Ok(GaussPoint {
        mean: &p.mean + u,
        cov,
    })
}

/// BW logarithm: the tangent `(u, X)` with `bw_exp(a, u, X) = b`, namely
/// `u = m_b − m_a` and `X = Σ_a⁻¹ # Σ_b − I`.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if either covariance fails the SPD
/// floor.
pub fn bw_log(a: &GaussPoint, b: &GaussPoint) -> Result<(DVector<f64>, SymMatrix)> {
    let gm = geometric_mean(&spd_inverse(&a.cov)?, &b.cov)?;
    let mut x = gm.into_matrix();
    for i in 0..x.nrows() {
        x[(i, i)] -= 1.0;
    }
    Ok((&b.mean - &a.mean, SymMatrix::new_unchecked(x)))
}

/// BW vector transport of the covariance chart factor from `Σ₁` to `Σ₂`:
/// `X ↦ L_{Σ₂}(A Σ₁ X + X Σ₁ A)` with `A = Σ₁⁻¹ # Σ₂`. The mean factor is
/// carried unchanged.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if either covariance fails the SPD
/// floor.
pub fn bw_transport(
    from: &GaussPoint,
    to: &GaussPoint,
    u: &DVector<f64>,
    x: &SymMatrix,
) -> Result<(DVector<f64>, SymMatrix)> {
    let a_map = geometric_mean(&spd_inverse(&from.cov)?, &to.cov)?;
    let eig_to = sym_eig(&to.cov)?;
    let x2 = transport_cov_with(&a_map, &from.cov, &eig_to, x.matrix())?;
    Ok((u.clone(), SymMatrix::new_unchecked(x2)))
}

/// Covariance-block transport with precomputed pieces: `A = Σ₁⁻¹ # Σ₂` and
/// the eigendecomposition of `Σ₂`. Defined for arbitrary chart factors `X`
/// (the expression preserves symmetric and skew parts separately), which
/// lets curvature states conjugate the transport with basis-vector probes.
fn transport_cov_with(
    a_map: &SymMatrix,
    sigma_from: &SymMatrix,
    eig_to: &SpectralDecomposition,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let as1 = a_map.matrix() * sigma_from.matrix();
    let arg = &as1 * x + x * as1.transpose();
    Ok(lyapunov_solve_general(eig_to, &arg)?)
}

/// 2-Wasserstein distance between Gaussians:
/// `W₂² = ‖m₁−m₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if a covariance square root fails.
pub fn bw_distance(a: &GaussPoint, b: &GaussPoint) -> Result<f64> {
    let s1 = sym_sqrt(&a.cov)?;
    let inner = SymMatrix::new_unchecked(s1.matrix() * b.cov.matrix() * s1.matrix());
    let eig = sym_eig(&inner)?;
    let cross = eig.values.iter().map(|&l| l.max(0.0).sqrt()).sum::<f64>();
    let mean_sq = (&a.mean - &b.mean).norm_squared();
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok((mean_sq + trace_term.max(0.0)).sqrt())
}

/// KL divergence `KL(N(m₀,Σ₀) ‖ N(m₁,Σ₁))`.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if `Σ₁` is not invertible or either
/// log-determinant is undefined.
pub fn gaussian_kl(from: &GaussPoint, to: &GaussPoint) -> Result<f64> {
    let d = from.dim() as f64;
    let eig0 = sym_eig(&from.cov)?;
    let eig1 = sym_eig(&to.cov)?;
    if !eig0.is_spd() || !eig1.is_spd() {
        return Err(GeometryError::SingularMetric(
            "KL divergence needs SPD covariances".into(),
        ));
    }
    let inv1 = eig1.apply_fn(f64::recip);
    let delta = &to.mean - &from.mean;
    let trace = (inv1.matrix() * from.cov.matrix()).trace();
    let maha = delta.dot(&(inv1.matrix() * &delta));
    let logdet0: f64 = eig0.values.iter().map(|&l| l.ln()).sum();
    let logdet1: f64 = eig1.values.iter().map(|&l| l.ln()).sum();
    Ok(0.5 * (trace + maha - d + logdet1 - logdet0))
}

/// Gaussian log-density `log N(y; m, Σ)`.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if the covariance fails the SPD floor.
pub fn gaussian_log_density(p: &GaussPoint, y: &DVector<f64>) -> Result<f64> {
    let eig = sym_eig(&p.cov)?;
    if !eig.is_spd() {
        return Err(GeometryError::SingularMetric(
            "log-density needs an SPD covariance".into(),
        ));
    }
    let d = p.dim() as f64;
    let inv = eig.apply_fn(f64::recip);
    let delta = y - &p.mean;
    let maha = delta.dot(&(inv.matrix() * &delta));
    let logdet: f64 = eig.values.iter().map(|&l| l.ln()).sum();
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + maha))
}

/// Flat-chart (Euclidean) score of the Gaussian log-density at `y`:
/// `∇_m log N = Σ⁻¹(y−m)` and
/// `∇_Σ log N = ½ Σ⁻¹(y−m)(y−m)ᵀΣ⁻¹ − ½ Σ⁻¹`.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if the covariance fails the SPD floor.
pub fn gaussian_score_euclidean(
    p: &GaussPoint,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, SymMatrix)> {
    let inv = spd_inverse(&p.cov)?;
    let w = inv.matrix() * (y - &p.mean);
    let outer = &w * w.transpose();
    let g_cov = SymMatrix::new_unchecked(0.5 * (outer - inv.matrix()));
    Ok((w, g_cov))
}

/// BW-chart (Riemannian) score of the Gaussian log-density at `y`: the
/// chart gradient `(Σ⁻¹(y−m), 2 L_Σ(sym(δδᵀΣ⁻¹) − I))` with `δ = y − m`,
/// i.e. the flat score pushed through the inverse chart Gram operator.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if the covariance fails the SPD floor.
pub fn gaussian_score_bw(p: &GaussPoint, y: &DVector<f64>) -> Result<(DVector<f64>, SymMatrix)> {
    let d = p.dim();
    let eig = sym_eig(&p.cov)?;
    if !eig.is_spd() {
        return Err(GeometryError::SingularMetric(
            "score needs an SPD covariance".into(),
        ));
    }
    let inv = eig.apply_fn(f64::recip);
    let w = inv.matrix() * (y - &p.mean);
    let delta = y - &p.mean;
    // sym(δδᵀΣ⁻¹) − I = ½(δ wᵀ + w δᵀ) − I.
    let mut arg = 0.5 * (&delta * w.transpose() + &w * delta.transpose());
    for i in 0..d {
        arg[(i, i)] -= 1.0;
    }
    let x = lyapunov_solve_with(&eig, &SymMatrix::new_unchecked(arg))?;
    Ok((w, SymMatrix::new_unchecked(2.0 * x.into_matrix())))
}

/// Fisher information quadratic form of the Gaussian family in the BW
/// chart: for `v = (u, X)` with ambient covariance velocity `U = XΣ + ΣX`,
/// `F[v, v] = uᵀΣ⁻¹u + ½ tr(Σ⁻¹ U Σ⁻¹ U)`.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if the covariance fails the SPD floor.
pub fn gaussian_fisher_form(p: &GaussPoint, u: &DVector<f64>, x: &SymMatrix) -> Result<f64> {
    let inv = spd_inverse(&p.cov)?;
    let amb = x.matrix() * p.cov.matrix() + p.cov.matrix() * x.matrix();
    let siu = inv.matrix() * &amb;
    Ok(u.dot(&(inv.matrix() * u)) + 0.5 * (&siu * &siu).trace())
}

/// Exact natural-gradient direction in the flat `(m, Σ)` chart from flat
/// gradients `(g_m, g_Σ)`: `(Σ g_m, 2 Σ g_Σ Σ)`.
pub fn natural_gradient_flat(
    p: &GaussPoint,
    g_mean: &DVector<f64>,
    g_cov: &SymMatrix,
) -> (DVector<f64>, SymMatrix) {
    let nat_mean = p.cov.matrix() * g_mean;
    let nat_cov =
        SymMatrix::new_unchecked(2.0 * p.cov.matrix() * g_cov.matrix() * p.cov.matrix());
    (nat_mean, nat_cov)
}

/// Exact natural-gradient direction in the BW (Lyapunov) chart from flat
/// gradients: `(Σ g_m, 2 L_{Σ⁻¹}(g_Σ))`. Stepping the covariance along the
/// returned `X` moves `Σ` with velocity `ΣX + XΣ`, matching
/// [`natural_gradient_flat`] to first order.
///
/// # Errors
///
/// [`GeometryError::SingularMetric`] if the covariance fails the SPD floor.
pub fn natural_gradient_bw(
    p: &GaussPoint,
    g_mean: &DVector<f64>,
    g_cov: &SymMatrix,
) -> Result<(DVector<f64>, SymMatrix)> {
    let nat_mean = p.cov.matrix() * g_mean;
    // 2 L_{Σ⁻¹}(g_Σ) = 2 L_Σ(Σ g_Σ Σ).
    let eig = sym_eig(&p.cov)?;
    let arg = SymMatrix::new_unchecked(p.cov.matrix() * g_cov.matrix() * p.cov.matrix());
    let x = lyapunov_solve_with(&eig, &arg)?;
    Ok((nat_mean, SymMatrix::new_unchecked(2.0 * x.into_matrix())))
}

// ---------------------------------------------------------------------------
// Manifold backends
// ---------------------------------------------------------------------------

/// Gaussians with the Bures–Wasserstein metric (see module docs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BwGaussian {
    d: usize,
}

impl BwGaussian {
    /// BW geometry on `d`-dimensional Gaussians.
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    fn check_tangent(&self, t: &Tangent) -> Result<()> {
        let want = self.d + self.d * self.d;
        if t.len() != want {
            return Err(GeometryError::DimensionMismatch {
                expected: want,
                got: t.len(),
            });
        }
        Ok(())
    }

    fn retract_impl(&self, theta: &GaussPoint, v: &Tangent) -> Result<(GaussPoint, RetractDiag)> {
        self.check_tangent(v)?;
        let (u, x) = gauss_chart_unpack(self.d, v);
        let stepped = bw_exp(theta, &u, &SymMatrix::new_unchecked(x))?;
        let clip = clip_eigenvalues(&stepped.cov, COVARIANCE_EIG_FLOOR)?;
        // A negative eigenvalue means the step left the SPD cone entirely;
        // flooring that would accept an arbitrarily wrong covariance, so
        // report it as recoverable and let callers shrink the step. Only
        // positive-but-tiny grazes are floored.
        if clip.min_eigenvalue < 0.0 {
            return Err(GeometryError::RankCollapse {
                sigma_r: clip.min_eigenvalue,
                sigma_1: clip.max_eigenvalue,
            });
        }
        Ok((
            GaussPoint {
                mean: stepped.mean,
                cov: clip.matrix,
            },
            RetractDiag {
                clipped_eigenvalues: clip.clipped,
            },
        ))
    }
}

impl Manifold for BwGaussian {
    type Point = GaussPoint;

    fn dim(&self) -> usize {
        self.d + self.d * self.d
    }

    fn blocks(&self) -> Vec<usize> {
        vec![self.d, self.d * self.d]
    }

    fn ambient_dim(&self) -> usize {
        self.d + self.d * self.d
    }

    fn inner(&self, theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64 {
        u.dot(&self.metric_apply(theta, v))
    }

    /// Gram operator `(u, X) ↦ (u, ½(ΣX + XΣ))`, the symmetric-Kronecker
    /// form `½(I⊗Σ + Σ⊗I)`. It is positive definite on the whole chart
    /// (eigenvalues `(λᵢ+λⱼ)/2`), restricts to the usual trace metric on
    /// symmetric factors, and keeps symmetric and skew parts separated, so
    /// basis-vector probes by curvature-state updates are well defined.
    fn metric_apply(&self, theta: &Self::Point, u: &Tangent) -> Tangent {
        let (um, x) = gauss_chart_unpack(self.d, u);
        let sx = theta.cov.matrix() * &x;
        let xs = &x * theta.cov.matrix();
        let g = 0.5 * (sx + xs);
        gauss_chart_pack(&um, &g)
    }

    fn metric_solve(&self, theta: &Self::Point, u: &Tangent) -> Tangent {
        let (um, w) = gauss_chart_unpack(self.d, u);
        let eig = sym_eig(&theta.cov).expect("point covariance is finite");
        let x = lyapunov_solve_general(&eig, &w).expect("point covariance is SPD");
        gauss_chart_pack(&um, &(x * 2.0))
    }

    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point> {
        Ok(self.retract_impl(theta, v)?.0)
    }

    fn retract_diag(&self, theta: &Self::Point, v: &Tangent) -> Result<(Self::Point, RetractDiag)> {
        self.retract_impl(theta, v)
    }

    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent> {
        let (u, x) = bw_log(a, b)?;
        Ok(gauss_chart_pack(&u, x.matrix()))
    }

    fn transport(&self, a: &Self::Point, b: &Self::Point, u: &Tangent) -> Result<Tangent> {
        self.check_tangent(u)?;
        let (um, x) = gauss_chart_unpack(self.d, u);
        let a_map = geometric_mean(&spd_inverse(&a.cov)?, &b.cov)?;
        let eig_to = sym_eig(&b.cov)?;
        let x2 = transport_cov_with(&a_map, &a.cov, &eig_to, &x)?;
        Ok(gauss_chart_pack(&um, &x2))
    }

    fn transport_adjoint(&self, a: &Self::Point, b: &Self::Point, w: &Tangent) -> Result<Tangent> {
        // The metric adjoint of the BW transport equals the reverse
        // transport: with A = Σ₁⁻¹#Σ₂ one has A Σ₁ A = Σ₂, so
        // Σ₂⁻¹#Σ₁ = A⁻¹ and the two Kronecker forms pair up exactly.
        self.transport(b, a, w)
    }

    fn transport_is_isometric(&self) -> bool {
        false
    }

    fn project(&self, theta: &Self::Point, ambient: &DVector<f64>) -> Tangent {
        let (u, z) = gauss_chart_unpack(self.d, ambient);
        let sym = SymMatrix::new_unchecked(0.5 * (&z + z.transpose()));
        let eig = sym_eig(&theta.cov).expect("point covariance is finite");
        let x = lyapunov_solve_with(&eig, &sym).expect("point covariance is SPD");
        gauss_chart_pack(&u, x.matrix())
    }

    fn embed_point(&self, theta: &Self::Point) -> DVector<f64> {
        gauss_chart_pack(&theta.mean, theta.cov.matrix())
    }

    fn embed_tangent(&self, theta: &Self::Point, u: &Tangent) -> DVector<f64> {
        let (um, x) = gauss_chart_unpack(self.d, u);
        let amb = &x * theta.cov.matrix() + theta.cov.matrix() * &x;
        gauss_chart_pack(&um, &amb)
    }

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64 {
        bw_distance(a, b).unwrap_or(f64::NAN)
    }

    fn exact_exp(&self, theta: &Self::Point, v: &Tangent) -> Option<Result<Self::Point>> {
        let (u, x) = match self.check_tangent(v) {
            Ok(()) => gauss_chart_unpack(self.d, v),
            Err(e) => return Some(Err(e)),
        };
        Some(bw_exp(theta, &u, &SymMatrix::new_unchecked(x)))
    }

    fn step_maps_along(
        &self,
        old: &Self::Point,
        _v: &Tangent,
        new: &Self::Point,
    ) -> Result<Box<dyn TransportMaps + '_>> {
        Ok(Box::new(BwStepMaps::new(self.d, old, new)?))
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point {
        let d = self.d;
        let mean = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let b = DMatrix::from_fn(d, d, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z / (d as f64).sqrt()
        });
        let cov = SymMatrix::new_unchecked(&b * b.transpose() + DMatrix::identity(d, d) * 0.5);
        GaussPoint { mean, cov }
    }
}

/// Prepared BW transport maps for one step, reusing the geometric mean and
/// both covariance eigenframes across all transported vectors. One
/// application costs `O(d³)`, so conjugating a dense `d²`-sized state block
/// costs `O(d⁵)` without materializing the transport matrix.
struct BwStepMaps {
    d: usize,
    sigma_old: SymMatrix,
    sigma_new: SymMatrix,
    eig_old: SpectralDecomposition,
    eig_new: SpectralDecomposition,
    /// `A = Σ_old⁻¹ # Σ_new`.
    a_fwd: SymMatrix,
    /// `A⁻¹ = Σ_new⁻¹ # Σ_old`.
    a_bwd: SymMatrix,
}

impl BwStepMaps {
    fn new(d: usize, old: &GaussPoint, new: &GaussPoint) -> Result<Self> {
        let eig_old = sym_eig(&old.cov)?;
        let eig_new = sym_eig(&new.cov)?;
        if !eig_old.is_spd() || !eig_new.is_spd() {
            return Err(GeometryError::SingularMetric(
                "transport needs SPD covariances".into(),
            ));
        }
        let a_fwd = geometric_mean(&eig_old.apply_fn(f64::recip), &new.cov)?;
        let a_bwd = geometric_mean(&eig_new.apply_fn(f64::recip), &old.cov)?;
        Ok(Self {
            d,
            sigma_old: old.cov.clone(),
            sigma_new: new.cov.clone(),
            eig_old,
            eig_new,
            a_fwd,
            a_bwd,
        })
    }

    fn map(
        &self,
        v: &Tangent,
        a_map: &SymMatrix,
        sigma_from: &SymMatrix,
        eig_to: &SpectralDecomposition,
    ) -> Result<Tangent> {
        let (u, x) = gauss_chart_unpack(self.d, v);
        let x2 = transport_cov_with(a_map, sigma_from, eig_to, &x)?;
        Ok(gauss_chart_pack(&u, &x2))
    }
}

impl TransportMaps for BwStepMaps {
    fn forward(&self, u: &Tangent) -> Result<Tangent> {
        self.map(u, &self.a_fwd, &self.sigma_old, &self.eig_new)
    }

    fn backward(&self, w: &Tangent) -> Result<Tangent> {
        self.map(w, &self.a_bwd, &self.sigma_new, &self.eig_old)
    }

    fn backward_adjoint(&self, u: &Tangent) -> Result<Tangent> {
        // (T_{new→old})* = T_{old→new}.
        self.forward(u)
    }

    fn isometric(&self) -> bool {
        false
    }
}

/// Gaussians in the flat `(m, Σ)` chart: identity metric, additive
/// retraction with the [`COVARIANCE_EIG_FLOOR`] positivity projection, and
/// identity (isometric) transport. Shares [`GaussPoint`] with
/// [`BwGaussian`] so the same objectives run under either geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaussEuclidean {
    d: usize,
}

impl GaussEuclidean {
    /// Flat-chart Gaussian geometry on `ℝ^d`.
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    fn check_tangent(&self, t: &Tangent) -> Result<()> {
        let want = self.d + self.d * self.d;
        if t.len() != want {
            return Err(GeometryError::DimensionMismatch {
                expected: want,
                got: t.len(),
            });
        }
        Ok(())
    }

    fn retract_impl(&self, theta: &GaussPoint, v: &Tangent) -> Result<(GaussPoint, RetractDiag)> {
        self.check_tangent(v)?;
        let (u, ds) = gauss_chart_unpack(self.d, v);
        let raw = SymMatrix::new_unchecked(
            theta.cov.matrix() + 0.5 * (&ds + ds.transpose()),
        );
        let clip = clip_eigenvalues(&raw, COVARIANCE_EIG_FLOOR)?;
        // Same cone policy as the curved chart: grazes are floored,
        // genuine exits are recoverable errors for step control.
        if clip.min_eigenvalue < 0.0 {
            return Err(GeometryError::RankCollapse {
                sigma_r: clip.min_eigenvalue,
                sigma_1: clip.max_eigenvalue,
            });
        }
        Ok((
            GaussPoint {
                mean: &theta.mean + u,
                cov: clip.matrix,
            },
            RetractDiag {
                clipped_eigenvalues: clip.clipped,
            },
        ))
    }
}

impl Manifold for GaussEuclidean {
    type Point = GaussPoint;

    fn dim(&self) -> usize {
        self.d + self.d * self.d
    }

    fn blocks(&self) -> Vec<usize> {
        vec![self.d, self.d * self.d]
    }

    fn ambient_dim(&self) -> usize {
        self.d + self.d * self.d
    }

    fn inner(&self, _theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64 {
        u.dot(v)
    }

    fn metric_apply(&self, _theta: &Self::Point, u: &Tangent) -> Tangent {
        u.clone()
    }

    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point> {
        Ok(self.retract_impl(theta, v)?.0)
    }

    fn retract_diag(&self, theta: &Self::Point, v: &Tangent) -> Result<(Self::Point, RetractDiag)> {
        self.retract_impl(theta, v)
    }

    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent> {
        let dm = &b.mean - &a.mean;
        let ds = b.cov.matrix() - a.cov.matrix();
        Ok(gauss_chart_pack(&dm, &ds))
    }

    fn transport(&self, _a: &Self::Point, _b: &Self::Point, u: &Tangent) -> Result<Tangent> {
        self.check_tangent(u)?;
        Ok(u.clone())
    }

    fn transport_adjoint(
        &self,
        _a: &Self::Point,
        _b: &Self::Point,
        w: &Tangent,
    ) -> Result<Tangent> {
        self.check_tangent(w)?;
        Ok(w.clone())
    }

    fn transport_is_isometric(&self) -> bool {
        true
    }

    fn project(&self, _theta: &Self::Point, ambient: &DVector<f64>) -> Tangent {
        let (u, z) = gauss_chart_unpack(self.d, ambient);
        let sym = 0.5 * (&z + z.transpose());
        gauss_chart_pack(&u, &sym)
    }

    fn embed_point(&self, theta: &Self::Point) -> DVector<f64> {
        gauss_chart_pack(&theta.mean, theta.cov.matrix())
    }

    fn embed_tangent(&self, _theta: &Self::Point, u: &Tangent) -> DVector<f64> {
        let (um, x) = gauss_chart_unpack(self.d, u);
        let sym = 0.5 * (&x + x.transpose());
        gauss_chart_pack(&um, &sym)
    }

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64 {
        let dm = (&a.mean - &b.mean).norm_squared();
        let ds = (a.cov.matrix() - b.cov.matrix()).norm_squared();
        (dm + ds).sqrt()
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point {
        BwGaussian::new(self.d).random_point(rng)
    }
}
