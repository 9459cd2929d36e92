//! Orthonormal-frame (Stiefel) manifold `St(n, p)` with Cayley retraction.
//!
//! Points are `n×p` matrices with orthonormal columns (`XᵀX = I`). The
//! metric is the embedded trace metric `⟨Y, Z⟩ = tr(YᵀZ)`; a tangent at `X`
//! is any `Z` with `XᵀZ` skew-symmetric. Chart coordinates are the plain
//! column-major `vec(Z)` of length `n·p`, so the chart Gram operator is the
//! identity.
//!
//! The retraction is the Cayley step: with `P̄ = I − ½XXᵀ` and the skew
//! matrix `W_U = P̄UXᵀ − XUᵀP̄`,
//!
//! `R_X(U) = (I − ½W_U)⁻¹ (I + ½W_U) X`.
//!
//! Vector transport along that step applies the same Cayley matrix to the
//! carried tangent. Because `W_U` is skew the Cayley matrix is orthogonal:
//! the transport is isometric and its metric adjoint equals its inverse
//! (`Cay(−W_U)`). When `p ≤ n/4` the solve uses the factored form
//! `W = ABᵀ` with `A = [P̄U, −X]`, `B = [X, P̄U]` and a `2p×2p`
//! Sherman–Morrison–Woodbury inverse instead of an `n×n` one.
//!
//! Orthonormality drift is monitored: any produced point with
//! `‖XᵀX − I‖_F` above [`DRIFT_TOL`] is re-orthonormalized by a sign-fixed
//! thin QR.
//!
//! [`st_geodesic`] evaluates the exact embedded-metric geodesic (matrix
//! exponential form) for order-of-accuracy diagnostics; the Cayley step
//! agrees with it to first order (gap `O(t²)`), which the tests pin down.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::manifold::{GeometryError, Manifold, Result, Tangent, TransportMaps};

/// Orthonormality drift above which produced points are re-orthonormalized.
pub const DRIFT_TOL: f64 = 1e-8;

/// Residual tolerance (relative) for accepting an inverse-retraction solve.
pub const INVERSE_RETRACT_TOL: f64 = 1e-8;

/// The Stiefel manifold `St(n, p)` of orthonormal `n×p` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stiefel {
    n: usize,
    p: usize,
}

/// Packs an `n×p` matrix into chart coordinates (column-major).
pub fn st_chart_pack(z: &DMatrix<f64>) -> Tangent {
    DVector::from_column_slice(z.as_slice())
}

/// Unpacks chart coordinates back into an `n×p` matrix.
pub fn st_chart_unpack(n: usize, p: usize, t: &Tangent) -> DMatrix<f64> {
    debug_assert_eq!(t.len(), n * p);
    DMatrix::from_column_slice(n, p, t.as_slice())
}

/// Orthonormality defect `‖XᵀX − I‖_F`.
pub fn st_drift(x: &DMatrix<f64>) -> f64 {
    let p = x.ncols();
    (x.transpose() * x - DMatrix::identity(p, p)).norm()
}

/// Tangent projection at `X`: `Z ↦ Z − X·sym(XᵀZ)`. Idempotent and
/// self-adjoint for the trace metric; the output satisfies the tangency
/// condition `Xᵀ(proj Z)` skew to roughly `1e-9·‖Z‖`.
pub fn st_project(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let xtz = x.transpose() * z;
    let sym = 0.5 * (&xtz + xtz.transpose());
    z - x * sym
}

/// Thin QR re-orthonormalization with the sign convention `R_ii > 0`, so
/// the result is a deterministic function of the input frame.
pub fn st_reorthonormalize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = x.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// The Cayley operator of one step, prepared once and applied to many
/// vectors. Uses the SMW factorization when `p ≤ n/4`, a dense `n×n`
/// factorization otherwise.
pub(crate) struct CayleyOp {
    n: usize,
    p: usize,
    route: CayleyRoute,
}

enum CayleyRoute {
    /// `W = A Bᵀ` with `A, B` of size `n×2p`; `c_plus = (I − ½BᵀA)⁻¹`,
    /// `c_minus = (I + ½BᵀA)⁻¹` (both `2p×2p`).
    Smw {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c_plus: DMatrix<f64>,
        c_minus: DMatrix<f64>,
    },
    /// Materialized `W` with prefactored `(I ∓ ½W)`.
    Dense {
        w: DMatrix<f64>,
        lu_minus: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        lu_plus: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
}

impl CayleyOp {
    /// Builds the operator for the step tangent `u` at `x`; `force_dense`
    /// overrides the route choice (used by equivalence tests).
    pub(crate) fn new(x: &DMatrix<f64>, u: &DMatrix<f64>, force_dense: bool) -> Result<Self> {
        let (n, p) = x.shape();
        // P̄U = U − ½X(XᵀU).
        let xtu = x.transpose() * u;
        let pu = u - 0.5 * x * xtu;
        if !force_dense && 4 * p <= n {
            let mut a = DMatrix::zeros(n, 2 * p);
            let mut b = DMatrix::zeros(n, 2 * p);
            a.columns_mut(0, p).copy_from(&pu);
            a.columns_mut(p, p).copy_from(&(-x));
            b.columns_mut(0, p).copy_from(x);
            b.columns_mut(p, p).copy_from(&pu);
            let bta = b.transpose() * &a;
            let eye = DMatrix::identity(2 * p, 2 * p);
            let c_plus = (&eye - 0.5 * &bta).try_inverse().ok_or_else(|| {
                GeometryError::RetractFail("Cayley SMW core (I − ½BᵀA) is singular".into())
            })?;
            let c_minus = (&eye + 0.5 * &bta).try_inverse().ok_or_else(|| {
                GeometryError::RetractFail("Cayley SMW core (I + ½BᵀA) is singular".into())
            })?;
            Ok(Self {
                n,
                p,
                route: CayleyRoute::Smw { a, b, c_plus, c_minus },
            })
        } else {
            let w = &pu * x.transpose() - x * pu.transpose();
            let eye = DMatrix::identity(n, n);
            let lu_minus = (&eye - 0.5 * &w).lu();
            let lu_plus = (&eye + 0.5 * &w).lu();
            Ok(Self {
                n,
                p,
                route: CayleyRoute::Dense { w, lu_minus, lu_plus },
            })
        }
    }

    /// Applies `Cay(W) = (I − ½W)⁻¹(I + ½W)` to every column of `z`.
    pub(crate) fn apply(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.route {
            CayleyRoute::Smw { a, b, c_plus, .. } => {
                let t = z + 0.5 * a * (b.transpose() * z);
                Ok(&t + 0.5 * a * (c_plus * (b.transpose() * &t)))
            }
            CayleyRoute::Dense { w, lu_minus, .. } => {
                let rhs = z + 0.5 * w * z;
                lu_minus.solve(&rhs).ok_or_else(|| {
                    GeometryError::RetractFail("Cayley solve (I − ½W) failed".into())
                })
            }
        }
    }

    /// Applies `Cay(W)⁻¹ = Cay(−W)`, which is also the metric adjoint of
    /// [`CayleyOp::apply`] since `Cay(W)` is orthogonal.
    pub(crate) fn apply_inverse(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.route {
            CayleyRoute::Smw { a, b, c_minus, .. } => {
                let t = z - 0.5 * a * (b.transpose() * z);
                Ok(&t - 0.5 * a * (c_minus * (b.transpose() * &t)))
            }
            CayleyRoute::Dense { w, lu_plus, .. } => {
                let rhs = z - 0.5 * w * z;
                lu_plus.solve(&rhs).ok_or_else(|| {
                    GeometryError::RetractFail("Cayley solve (I + ½W) failed".into())
                })
            }
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.n, self.p)
    }
}

impl Stiefel {
    /// `St(n, p)` with `p <= n`.
    ///
    /// # Panics
    ///
    /// Panics if `p > n` or `p == 0` (a configuration bug, not a runtime
    /// input).
    pub fn new(n: usize, p: usize) -> Self {
        assert!(p >= 1 && p <= n, "St(n={n}, p={p}) requires 1 <= p <= n");
        Self { n, p }
    }

    /// Frame height `n`.
    pub fn rows(&self) -> usize {
        self.n
    }

    /// Frame width `p`.
    pub fn cols(&self) -> usize {
        self.p
    }

    fn check_tangent(&self, t: &Tangent) -> Result<()> {
        if t.len() != self.n * self.p {
            return Err(GeometryError::DimensionMismatch {
                expected: self.n * self.p,
                got: t.len(),
            });
        }
        Ok(())
    }

    /// Retraction on matrix arguments; `force_dense` pins the solve route
    /// (tests compare both).
    pub(crate) fn retract_mat(
        &self,
        x: &DMatrix<f64>,
        u: &DMatrix<f64>,
        force_dense: bool,
    ) -> Result<DMatrix<f64>> {
        let op = CayleyOp::new(x, u, force_dense)?;
        let mut y = op.apply(x)?;
        if st_drift(&y) > DRIFT_TOL {
            y = st_reorthonormalize(&y);
        }
        Ok(y)
    }

    /// Solves the Cayley relation for the step tangent: finds tangent `U`
    /// with `retract(X, U) = Y`, using the closed-form reduction of
    /// `W_U (X + Y) = 2(Y − X)` to `p×p` solves.
    ///
    /// # Errors
    ///
    /// [`GeometryError::RadiusExceeded`] when `I + XᵀY` is singular or the
    /// reconstructed step fails the residual check (the points are too far
    /// apart for the Cayley chart).
    pub(crate) fn inverse_retract_mat(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let v = y - x;
        let s = x + y;
        let m = DMatrix::identity(self.p, self.p) + x.transpose() * y;
        let m_inv = m.clone().try_inverse().ok_or_else(|| {
            GeometryError::RadiusExceeded("I + XᵀY is singular; points are antipodal".into())
        })?;
        // Solve for the skew core K and the combined factor Ā of
        // W = ĀXᵀ − XĀᵀ:  K = (XᵀV + M⁻ᵀ(Vᵀ P⊥ S)) M⁻¹,
        // Ā = (2 P⊥V + X K M) M⁻¹, with P⊥ = I − XXᵀ.
        let xtv = x.transpose() * &v;
        let p_perp_s = &s - x * (x.transpose() * &s);
        let p_perp_v = &v - x * (x.transpose() * &v);
        let k_raw = (&xtv + m_inv.transpose() * (v.transpose() * &p_perp_s)) * &m_inv;
        let k = 0.5 * (&k_raw - k_raw.transpose());
        let a_bar = (2.0 * &p_perp_v + x * &k * &m) * &m_inv;
        // Recover the tangent: U = X·(2 skew(XᵀĀ)) + P⊥Ā.
        let xta = x.transpose() * &a_bar;
        let a_skew = &xta - xta.transpose();
        let u = x * a_skew + (&a_bar - x * xta);
        let u = st_project(x, &u);
        // Accept only if the step actually reproduces Y.
        let back = self.retract_mat(x, &u, false)?;
        let resid = (&back - y).norm();
        let scale = (y - x).norm().max(1e-300);
        if resid > INVERSE_RETRACT_TOL * scale.max(1.0) {
            return Err(GeometryError::RadiusExceeded(format!(
                "Cayley inversion residual {resid:.3e} exceeds tolerance"
            )));
        }
        Ok(u)
    }
}

impl Manifold for Stiefel {
    type Point = DMatrix<f64>;

    fn dim(&self) -> usize {
        self.n * self.p
    }

    fn ambient_dim(&self) -> usize {
        self.n * self.p
    }

    fn inner(&self, _theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64 {
        u.dot(v)
    }

    fn metric_apply(&self, _theta: &Self::Point, u: &Tangent) -> Tangent {
        u.clone()
    }

    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point> {
        self.check_tangent(v)?;
        let u = st_chart_unpack(self.n, self.p, v);
        self.retract_mat(theta, &u, false)
    }

    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent> {
        Ok(st_chart_pack(&self.inverse_retract_mat(a, b)?))
    }

    fn transport(&self, a: &Self::Point, b: &Self::Point, u: &Tangent) -> Result<Tangent> {
        self.check_tangent(u)?;
        if (a - b).norm() <= f64::EPSILON * (a.norm() + 1.0) {
            return Ok(u.clone());
        }
        let step = self.inverse_retract_mat(a, b)?;
        let op = CayleyOp::new(a, &step, false)?;
        let z = st_chart_unpack(self.n, self.p, u);
        Ok(st_chart_pack(&op.apply(&z)?))
    }

    fn transport_adjoint(&self, a: &Self::Point, b: &Self::Point, w: &Tangent) -> Result<Tangent> {
        self.check_tangent(w)?;
        if (a - b).norm() <= f64::EPSILON * (a.norm() + 1.0) {
            return Ok(w.clone());
        }
        // Cay(W) is orthogonal, so the adjoint is the inverse Cay(−W).
        let step = self.inverse_retract_mat(a, b)?;
        let op = CayleyOp::new(a, &step, false)?;
        let z = st_chart_unpack(self.n, self.p, w);
        Ok(st_chart_pack(&op.apply_inverse(&z)?))
    }

    fn transport_is_isometric(&self) -> bool {
        true
    }

    fn project(&self, theta: &Self::Point, ambient: &DVector<f64>) -> Tangent {
        let z = st_chart_unpack(self.n, self.p, ambient);
        st_chart_pack(&st_project(theta, &z))
    }

    fn embed_point(&self, theta: &Self::Point) -> DVector<f64> {
        st_chart_pack(theta)
    }

    fn embed_tangent(&self, _theta: &Self::Point, u: &Tangent) -> DVector<f64> {
        u.clone()
    }

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64 {
        (a - b).norm()
    }

    fn step_maps_along(
        &self,
        old: &Self::Point,
        v: &Tangent,
        _new: &Self::Point,
    ) -> Result<Box<dyn TransportMaps + '_>> {
        let u = st_chart_unpack(self.n, self.p, v);
        Ok(Box::new(StiefelStepMaps {
            op: CayleyOp::new(old, &u, false)?,
        }))
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point {
        let g = DMatrix::from_fn(self.n, self.p, |_, _| StandardNormal.sample(rng));
        st_reorthonormalize(&g)
    }
}

/// Prepared Cayley transport for one step: a single factorization applied
/// to every carried vector.
struct StiefelStepMaps {
    op: CayleyOp,
}

impl TransportMaps for StiefelStepMaps {
    fn forward(&self, u: &Tangent) -> Result<Tangent> {
        let (n, p) = self.op.dims();
        Ok(st_chart_pack(&self.op.apply(&st_chart_unpack(n, p, u))?))
    }

    fn backward(&self, w: &Tangent) -> Result<Tangent> {
        let (n, p) = self.op.dims();
        Ok(st_chart_pack(
            &self.op.apply_inverse(&st_chart_unpack(n, p, w))?,
        ))
    }

    fn backward_adjoint(&self, u: &Tangent) -> Result<Tangent> {
        // backward = Cay(−W) is orthogonal; its adjoint is Cay(W).
        self.forward(u)
    }

    fn isometric(&self) -> bool {
        true
    }
}

/// Exact geodesic of the embedded trace metric from `x` along tangent `u`,
/// evaluated at time `t`:
///
/// `X(t) = [X, U] expm(t·[[A, −S],[I, A]]) [I; 0] expm(−tA)`
///
/// with `A = XᵀU` (skew) and `S = UᵀU`. Used as the reference curve for
/// retraction order-of-accuracy diagnostics; the Cayley retraction deviates
/// from it at `O(t²)`.
pub fn st_geodesic(x: &DMatrix<f64>, u: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let p = x.ncols();
    let a = x.transpose() * u;
    let s = u.transpose() * u;
    let mut m = DMatrix::zeros(2 * p, 2 * p);
    m.view_mut((0, 0), (p, p)).copy_from(&a);
    m.view_mut((0, p), (p, p)).copy_from(&(-&s));
    m.view_mut((p, 0), (p, p))
        .copy_from(&DMatrix::identity(p, p));
    m.view_mut((p, p), (p, p)).copy_from(&a);
    let big = (m * t).exp();
    let mut basis = DMatrix::zeros(x.nrows(), 2 * p);
    basis.columns_mut(0, p).copy_from(x);
    basis.columns_mut(p, p).copy_from(u);
    let first_cols = big.columns(0, p).clone_owned();
    let back = (a * (-t)).exp();
    basis * first_cols * back
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{
        check_retraction_axioms, check_transport_consistency, log_log_slope,
    };
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_instance(n: usize, p: usize, seed: u64) -> (Stiefel, DMatrix<f64>, DMatrix<f64>) {
        let m = Stiefel::new(n, p);
        let mut rng = StdRng::seed_from_u64(seed);
        let x = m.random_point(&mut rng);
        let v = m.random_tangent(&x, &mut rng);
        let u = st_chart_unpack(n, p, &v);
        (m, x, u)
    }

    #[test]
    fn projection_is_idempotent_and_tangent() {
        let mut rng = StdRng::seed_from_u64(1);
        for &(n, p) in &[(6, 3), (12, 2), (5, 5)] {
            let m = Stiefel::new(n, p);
            let x = m.random_point(&mut rng);
            let z = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
            let pz = st_project(&x, &z);
            let ppz = st_project(&x, &pz);
            assert!((&ppz - &pz).norm() <= 1e-12 * pz.norm().max(1.0));
            // Tangency: Xᵀ(PZ) must be skew.
            let xtp = x.transpose() * &pz;
            let sym = 0.5 * (&xtp + xtp.transpose());
            assert!(sym.norm() <= 1e-9 * z.norm());
        }
    }

    #[test]
    fn retraction_preserves_orthonormality() {
        for seed in 0..20 {
            let (m, x, u) = random_instance(9, 3, seed);
            let y = m.retract_mat(&x, &u, false).unwrap();
            assert!(st_drift(&y) <= 1e-9, "drift {:.3e}", st_drift(&y));
        }
    }

    #[test]
    fn retraction_axioms_pass() {
        let mut seed = 100;
        for &(n, p) in &[(8, 2), (6, 3), (5, 5)] {
            let m = Stiefel::new(n, p);
            for _ in 0..7 {
                seed += 1;
                let mut rng = StdRng::seed_from_u64(seed);
                let x = m.random_point(&mut rng);
                let v = m.random_tangent(&x, &mut rng);
                let report = check_retraction_axioms(&m, &x, &v).unwrap();
                assert!(report.passes(), "St({n},{p}): {report:?}");
            }
        }
    }

    #[test]
    fn smw_and_dense_routes_agree() {
        let (m, x, u) = random_instance(12, 2, 7);
        assert!(4 * 2 <= 12, "instance must qualify for the SMW route");
        let y_smw = m.retract_mat(&x, &u, false).unwrap();
        let y_dense = m.retract_mat(&x, &u, true).unwrap();
        assert!((&y_smw - &y_dense).norm() <= 1e-12 * y_dense.norm().max(1.0));
        // Transported vectors agree across routes too.
        let op_smw = CayleyOp::new(&x, &u, false).unwrap();
        let op_dense = CayleyOp::new(&x, &u, true).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        let z = DMatrix::from_fn(12, 2, |_, _| StandardNormal.sample(&mut rng));
        let a = op_smw.apply(&z).unwrap();
        let b = op_dense.apply(&z).unwrap();
        assert!((&a - &b).norm() <= 1e-12 * b.norm());
    }

    #[test]
    fn geodesic_matches_great_circle_on_the_sphere() {
        // For p = 1 the embedded geodesic is the great circle
        // X cos(‖u‖t) + (u/‖u‖) sin(‖u‖t).
        let (_, x, u) = random_instance(7, 1, 11);
        let speed = u.norm();
        for t in [0.3, 0.9, 1.7] {
            let geo = st_geodesic(&x, &u, t);
            let want = &x * (speed * t).cos() + (&u / speed) * (speed * t).sin();
            assert!((&geo - &want).norm() <= 1e-10, "t = {t}");
        }
    }

    #[test]
    fn geodesic_stays_on_manifold_with_constant_speed() {
        let (_, x, u) = random_instance(8, 3, 13);
        let h = 1e-6;
        for t in [0.0, 0.4, 1.1] {
            let gt = st_geodesic(&x, &u, t);
            assert!(st_drift(&gt) <= 1e-9);
            let plus = st_geodesic(&x, &u, t + h);
            let minus = st_geodesic(&x, &u, t - h);
            let vel = (plus - minus) / (2.0 * h);
            assert_relative_eq!(vel.norm(), u.norm(), max_relative = 1e-5);
        }
    }

    #[test]
    fn cayley_step_is_first_order_against_the_geodesic() {
        // ‖R(tU) − Geo(tU)‖ = O(t²) → log-log slope ≈ 2 (≥ 1.9).
        for seed in [21, 22, 23] {
            let (m, x, u) = random_instance(8, 3, seed);
            let unit = &u / u.norm();
            let ts = [1e-1, 1e-2, 1e-3];
            let gaps: Vec<f64> = ts
                .iter()
                .map(|&t| {
                    let r = m.retract_mat(&x, &(&unit * t), false).unwrap();
                    let g = st_geodesic(&x, &unit, t);
                    (r - g).norm()
                })
                .collect();
            let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
            let ys: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
            let slope = log_log_slope(&xs, &ys);
            assert!(slope >= 1.9, "order slope {slope:.3}");
        }
    }

    #[test]
    fn inverse_retract_recovers_the_step() {
        for seed in 30..40 {
            let (m, x, u) = random_instance(9, 3, seed);
            let step = &u * (0.5 / u.norm());
            let y = m.retract_mat(&x, &step, false).unwrap();
            let back = m.inverse_retract_mat(&x, &y).unwrap();
            let err = (&back - &step).norm() / step.norm();
            assert!(err <= 1e-9, "inversion error {err:.3e}");
        }
    }

    #[test]
    fn inverse_retract_rejects_antipodal_points() {
        let (m, x, _) = random_instance(6, 2, 41);
        let y = -&x;
        assert!(matches!(
            m.inverse_retract_mat(&x, &y),
            Err(GeometryError::RadiusExceeded(_))
        ));
    }

    #[test]
    fn transport_is_isometric_and_adjoint_consistent() {
        for seed in 50..60 {
            let (m, x, u) = random_instance(10, 2, seed);
            let step = &u * (0.3 / u.norm());
            let y = m.retract_mat(&x, &step, false).unwrap();
            let mut rng = StdRng::seed_from_u64(seed + 1000);
            let carried = m.random_tangent(&x, &mut rng);
            let w = m.random_tangent(&y, &mut rng);
            let report = check_transport_consistency(&m, &x, &y, &carried, &w).unwrap();
            assert!(report.passes(), "{report:?}");
        }
    }

    #[test]
    fn transport_commutes_with_power_of_two_scaling_bitwise() {
        let (m, x, u) = random_instance(12, 2, 61);
        let step = &u * (0.4 / u.norm());
        let y = m.retract_mat(&x, &step, false).unwrap();
        let mut rng = StdRng::seed_from_u64(62);
        let carried = m.random_tangent(&x, &mut rng);
        let doubled = m.transport(&x, &y, &(&carried * 2.0)).unwrap();
        let scaled = m.transport(&x, &y, &carried).unwrap() * 2.0;
        assert_eq!(doubled.as_slice(), scaled.as_slice());
    }

    #[test]
    fn step_maps_match_point_pair_transport() {
        let (m, x, u) = random_instance(10, 2, 71);
        let step = st_chart_pack(&(&u * (0.3 / u.norm())));
        let y = m.retract(&x, &step).unwrap();
        let maps = m.step_maps_along(&x, &step, &y).unwrap();
        let mut rng = StdRng::seed_from_u64(72);
        let carried = m.random_tangent(&x, &mut rng);
        let via_maps = maps.forward(&carried).unwrap();
        let direct = m.transport(&x, &y, &carried).unwrap();
        assert!((&via_maps - &direct).norm() <= 1e-9 * direct.norm());
        // Round trip through backward is the identity (orthogonal operator).
        let back = maps.backward(&via_maps).unwrap();
        assert!((&back - &carried).norm() <= 1e-12 * carried.norm());
    }

    #[test]
    fn ten_thousand_steps_stay_orthonormal() {
        let m = Stiefel::new(10, 3);
        let mut rng = StdRng::seed_from_u64(81);
        let mut x = m.random_point(&mut rng);
        for _ in 0..10_000 {
            let v = m.random_tangent(&x, &mut rng);
            let step = &v * (1e-2 / v.norm());
            x = m.retract_mat(&x, &st_chart_unpack(10, 3, &step), false).unwrap();
        }
        assert!(st_drift(&x) <= 1e-9, "drift {:.3e}", st_drift(&x));
    }
}
