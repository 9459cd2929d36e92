//! Manifold abstraction: chart coordinates, retraction, transport, metric.
//!
//! Every geometry backend exposes its tangent spaces through a fixed *chart*:
//! a tangent vector is a flat [`DVector<f64>`] of length [`Manifold::dim`],
//! split into named blocks by [`Manifold::blocks`]. The optimizer and the
//! inverse-Fisher states only ever see chart vectors, so they are completely
//! generic over the geometry.
//!
//! Conventions used throughout the crate:
//!
//! - `transport(a, b, u)` carries `u ∈ T_a` to `T_b` (source first).
//! - `transport_adjoint(a, b, w)` carries `w ∈ T_b` back to `T_a` and is the
//!   metric adjoint of `transport(a, b, ·)`:
//!   `⟨T u, w⟩_b = ⟨u, T* w⟩_a` for all `u ∈ T_a`, `w ∈ T_b`.
//! - `metric_apply` is the chart Gram operator `G_θ`; `inner(θ, u, v) =
//!   uᵀ G_θ v`. Backends choose charts so `G_θ = I` where possible.
//! - `retract(θ, v)` maps a tangent step to a new point;
//!   `inverse_retract(a, b)` finds `v` with `retract(a, v) = b` (or its
//!   leading-order approximation where the exact inverse is not closed-form —
//!   backends document which).
//! - `embed_point` / `embed_tangent` give an ambient Euclidean picture of the
//!   manifold, used by the finite-difference diagnostics below; `project`
//!   maps an ambient vector onto tangent chart coordinates.
//!
//! [`check_retraction_axioms`] and [`check_transport_consistency`] verify
//! these contracts numerically for any backend. Tolerances are the module
//! constants next to them.

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::LinalgError;

/// Errors raised by geometry operations.
#[derive(Debug, Error)]
pub enum GeometryError {
    /// Caller-supplied data violated a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A metric or covariance matrix is singular or indefinite.
    #[error("singular metric: {0}")]
    SingularMetric(String),
    /// A retraction argument left the chart domain (e.g. a covariance
    /// update with an eigenvalue at or below -1 in the Lyapunov chart).
    #[error("retraction argument outside chart domain (min eigenvalue {min_eig:.4e})")]
    ExpDomain {
        /// Smallest eigenvalue of the offending chart factor.
        min_eig: f64,
    },
    /// A retraction could not be evaluated (singular linear system).
    #[error("retraction failed: {0}")]
    RetractFail(String),
    /// Two points are too far apart for the requested inverse operation.
    #[error("inverse retraction out of radius: {0}")]
    RadiusExceeded(String),
    /// A factored point lost numerical rank.
    #[error("rank collapse: sigma_r = {sigma_r:.4e} vs sigma_1 = {sigma_1:.4e}")]
    RankCollapse {
        /// Smallest retained singular value.
        sigma_r: f64,
        /// Largest singular value.
        sigma_1: f64,
    },
    /// A chart vector had the wrong length.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch {
        /// Expected length.
        expected: usize,
        /// Received length.
        got: usize,
    },
}

impl From<LinalgError> for GeometryError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::InvalidInput(msg) => GeometryError::InvalidInput(msg),
            LinalgError::SingularMetric(msg) => GeometryError::SingularMetric(msg),
        }
    }
}

/// Result alias for geometry operations.
pub type Result<T> = std::result::Result<T, GeometryError>;

/// A point's tangent vector in chart coordinates.
pub type Tangent = DVector<f64>;

/// Side information from a single retraction, surfaced to run diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct RetractDiag {
    /// Eigenvalues raised to the positivity floor by the retraction's
    /// projection step (zero for backends without clipping).
    pub clipped_eigenvalues: usize,
}

/// A Riemannian manifold with chart-coordinate tangent vectors.
///
/// See the module docs for the conventions every implementation satisfies.
pub trait Manifold {
    /// Point representation (varies per backend).
    type Point: Clone + std::fmt::Debug + PartialEq;

    /// Chart dimension: the length of every tangent vector.
    fn dim(&self) -> usize;

    /// Sizes of the named coordinate blocks, summing to [`Manifold::dim`].
    /// Single-block backends return `vec![dim]`.
    fn blocks(&self) -> Vec<usize> {
        vec![self.dim()]
    }

    /// Length of the ambient embedding used by [`Manifold::embed_point`].
    fn ambient_dim(&self) -> usize;

    /// Riemannian inner product `⟨u, v⟩_θ` of two chart tangents.
    fn inner(&self, theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64;

    /// Metric norm `‖u‖_θ`.
    fn norm(&self, theta: &Self::Point, u: &Tangent) -> f64 {
        self.inner(theta, u, u).max(0.0).sqrt()
    }

    /// Applies the chart Gram operator: `u ↦ G_θ u`.
    fn metric_apply(&self, theta: &Self::Point, u: &Tangent) -> Tangent;

    /// Applies the inverse Gram operator: `u ↦ G_θ⁻¹ u`.
    ///
    /// The default is the identity, correct for every chart with `G_θ = I`;
    /// backends with a non-trivial metric override it.
    fn metric_solve(&self, _theta: &Self::Point, u: &Tangent) -> Tangent {
        u.clone()
    }

    /// Retraction: steps from `θ` along tangent `v` to a new point.
    ///
    /// # Errors
    ///
    /// Backend-specific: [`GeometryError::ExpDomain`] when `v` leaves the
    /// chart domain, [`GeometryError::RetractFail`] on singular linear
    /// systems, [`GeometryError::RankCollapse`] on factored-rank loss.
    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point>;

    /// [`Manifold::retract`] plus per-step diagnostics. The default reports
    /// no clipping; backends with a positivity projection override it.
    ///
    /// # Errors
    ///
    /// Same as [`Manifold::retract`].
    fn retract_diag(&self, theta: &Self::Point, v: &Tangent) -> Result<(Self::Point, RetractDiag)> {
        Ok((self.retract(theta, v)?, RetractDiag::default()))
    }

    /// Finds `v` with `retract(a, v) = b`.
    ///
    /// Exact for the Euclidean, Gaussian-transport, and orthonormal-frame
    /// backends; the fixed-rank backend documents a leading-order inverse.
    ///
    /// # Errors
    ///
    /// [`GeometryError::RadiusExceeded`] when `b` is outside the invertible
    /// neighborhood of `a`.
    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent>;

    /// Vector transport `T_{a→b}: T_a → T_b`.
    fn transport(&self, a: &Self::Point, b: &Self::Point, u: &Tangent) -> Result<Tangent>;

    /// Metric adjoint of [`Manifold::transport`], mapping `T_b → T_a`:
    /// `⟨T u, w⟩_b = ⟨u, T* w⟩_a`.
    fn transport_adjoint(&self, a: &Self::Point, b: &Self::Point, w: &Tangent)
        -> Result<Tangent>;

    /// Whether the transport preserves inner products exactly (up to
    /// rounding). Isometric transports let the sliding-window state carry a
    /// single vector set per score.
    fn transport_is_isometric(&self) -> bool;

    /// Projects an ambient vector (length [`Manifold::ambient_dim`]) onto
    /// tangent chart coordinates at `θ`.
    fn project(&self, theta: &Self::Point, ambient: &DVector<f64>) -> Tangent;

    /// Ambient embedding of a point.
    fn embed_point(&self, theta: &Self::Point) -> DVector<f64>;

    /// Ambient velocity of the chart tangent `u` at `θ`: the derivative of
    /// `embed_point(retract(θ, t·u))` at `t = 0`.
    fn embed_tangent(&self, theta: &Self::Point, u: &Tangent) -> DVector<f64>;

    /// Distance between two points. Backends with a closed-form geodesic
    /// distance use it; others fall back to the ambient Euclidean distance.
    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64;

    /// Exact exponential map where one is available in closed form.
    ///
    /// Returns `None` when the backend has no practical exact geodesic;
    /// the retraction-order diagnostic is then skipped.
    fn exact_exp(&self, _theta: &Self::Point, _v: &Tangent) -> Option<Result<Self::Point>> {
        None
    }

    /// Prepared transport operators for one optimizer step `old → new`,
    /// where `new = retract(old, v)`. Backends override this to reuse a
    /// single factorization across many transported vectors.
    ///
    /// # Errors
    ///
    /// Propagates transport failures from the underlying geometry.
    fn step_maps_along(
        &self,
        old: &Self::Point,
        _v: &Tangent,
        new: &Self::Point,
    ) -> Result<Box<dyn TransportMaps + '_>>
    where
        Self: Sized,
    {
        Ok(Box::new(PointPairMaps {
            manifold: self,
            old: old.clone(),
            new: new.clone(),
        }))
    }

    /// Prepared transport operators for a point pair, recovering the step
    /// tangent through the inverse retraction.
    ///
    /// # Errors
    ///
    /// Propagates inverse-retraction failures (for example out-of-radius
    /// pairs) and transport failures.
    fn step_maps(
        &self,
        from: &Self::Point,
        to: &Self::Point,
    ) -> Result<Box<dyn TransportMaps + '_>>
    where
        Self: Sized,
    {
        let v = self.inverse_retract(from, to)?;
        self.step_maps_along(from, &v, to)
    }

    /// Samples a point from a backend-chosen reference distribution
    /// (used by diagnostics and tests).
    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point;

    /// Samples a tangent at `θ` by projecting an ambient standard normal.
    fn random_tangent(&self, theta: &Self::Point, rng: &mut dyn RngCore) -> Tangent {
        let z = DVector::from_fn(self.ambient_dim(), |_, _| StandardNormal.sample(rng));
        self.project(theta, &z)
    }
}

/// Prepared linear maps for one transport step `old → new`.
///
/// `forward` is `T = T_{old→new}`; `backward` is `T_{new→old}` (the reverse
/// transport, which coincides with `T⁻¹` for the group-structured backends);
/// `backward_adjoint` is the metric adjoint of `backward`, mapping
/// `T_old → T_new`. `forward_inv_adjoint` is `T^{-*} = (T⁻¹)*`, which equals
/// `forward` exactly when the transport is isometric.
pub trait TransportMaps {
    /// `T_{old→new} u` for `u ∈ T_old`.
    fn forward(&self, u: &Tangent) -> Result<Tangent>;
    /// `T_{new→old} w` for `w ∈ T_new`.
    fn backward(&self, w: &Tangent) -> Result<Tangent>;
    /// Adjoint of [`TransportMaps::backward`]: maps `T_old → T_new`.
    fn backward_adjoint(&self, u: &Tangent) -> Result<Tangent>;
    /// `(T_{old→new})^{-*}` mapping `T_old → T_new`.
    ///
    /// # Errors
    ///
    /// [`GeometryError::InvalidInput`] for non-isometric transports without
    /// a closed-form inverse adjoint (callers fall back to dense
    /// materialization; see the sliding-window transport).
    fn forward_inv_adjoint(&self, u: &Tangent) -> Result<Tangent> {
        if self.isometric() {
            self.forward(u)
        } else {
            Err(GeometryError::InvalidInput(
                "inverse-adjoint transport has no closed form for this non-isometric backend"
                    .into(),
            ))
        }
    }
    /// Whether `forward` preserves inner products.
    fn isometric(&self) -> bool;
}

/// Generic [`TransportMaps`] backed by point-pair transport calls.
struct PointPairMaps<'m, M: Manifold> {
    manifold: &'m M,
    old: M::Point,
    new: M::Point,
}

impl<M: Manifold> TransportMaps for PointPairMaps<'_, M> {
    fn forward(&self, u: &Tangent) -> Result<Tangent> {
        self.manifold.transport(&self.old, &self.new, u)
    }

    fn backward(&self, w: &Tangent) -> Result<Tangent> {
        self.manifold.transport(&self.new, &self.old, w)
    }

    fn backward_adjoint(&self, u: &Tangent) -> Result<Tangent> {
        self.manifold.transport_adjoint(&self.new, &self.old, u)
    }

    fn isometric(&self) -> bool {
        self.manifold.transport_is_isometric()
    }
}

// ---------------------------------------------------------------------------
// Euclidean backend
// ---------------------------------------------------------------------------

/// Flat Euclidean space `ℝ^d`: identity metric, additive retraction,
/// identity transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Euclidean {
    d: usize,
}

impl Euclidean {
    /// Euclidean space of dimension `d`.
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.d {
            return Err(GeometryError::DimensionMismatch {
                expected: self.d,
                got: v.len(),
            });
        }
        Ok(())
    }
}

impl Manifold for Euclidean {
    type Point = DVector<f64>;

    fn dim(&self) -> usize {
        self.d
    }

    fn ambient_dim(&self) -> usize {
        self.d
    }

    fn inner(&self, _theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64 {
        u.dot(v)
    }

    fn metric_apply(&self, _theta: &Self::Point, u: &Tangent) -> Tangent {
        u.clone()
    }

    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point> {
        self.check_len(v)?;
        Ok(theta + v)
    }

    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent> {
        Ok(b - a)
    }

    fn transport(&self, _a: &Self::Point, _b: &Self::Point, u: &Tangent) -> Result<Tangent> {
        self.check_len(u)?;
        Ok(u.clone())
    }

    fn transport_adjoint(
        &self,
        _a: &Self::Point,
        _b: &Self::Point,
        w: &Tangent,
    ) -> Result<Tangent> {
        self.check_len(w)?;
        Ok(w.clone())
    }

    fn transport_is_isometric(&self) -> bool {
        true
    }

    fn project(&self, _theta: &Self::Point, ambient: &DVector<f64>) -> Tangent {
        ambient.clone()
    }

    fn embed_point(&self, theta: &Self::Point) -> DVector<f64> {
        theta.clone()
    }

    fn embed_tangent(&self, _theta: &Self::Point, u: &Tangent) -> DVector<f64> {
        u.clone()
    }

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64 {
        (a - b).norm()
    }

    fn exact_exp(&self, theta: &Self::Point, v: &Tangent) -> Option<Result<Self::Point>> {
        Some(self.retract(theta, v))
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point {
        DVector::from_fn(self.d, |_, _| StandardNormal.sample(rng))
    }
}

// ---------------------------------------------------------------------------
// Product manifold
// ---------------------------------------------------------------------------

/// Product of two manifolds with concatenated chart coordinates.
///
/// The tangent chart is `[chart(A) | chart(B)]`; blocks are the
/// concatenation of the factors' blocks. All operations act blockwise.
#[derive(Debug, Clone)]
pub struct Product<A: Manifold, B: Manifold> {
    /// First factor.
    pub a: A,
    /// Second factor.
    pub b: B,
}

impl<A: Manifold, B: Manifold> Product<A, B> {
    /// Product `a × b`.
    pub fn new(a: A, b: B) -> Self {
        Self { a, b }
    }

    /// Splits a product chart vector into factor views.
    pub fn split<'v>(&self, v: &'v Tangent) -> (DVector<f64>, DVector<f64>) {
        let da = self.a.dim();
        (
            DVector::from(v.rows(0, da).clone_owned()),
            DVector::from(v.rows(da, self.b.dim()).clone_owned()),
        )
    }

    fn split_ambient(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let da = self.a.ambient_dim();
        (
            DVector::from(v.rows(0, da).clone_owned()),
            DVector::from(v.rows(da, self.b.ambient_dim()).clone_owned()),
        )
    }

    /// Concatenates factor chart vectors.
    pub fn join(&self, va: &DVector<f64>, vb: &DVector<f64>) -> Tangent {
        let mut out = DVector::zeros(va.len() + vb.len());
        out.rows_mut(0, va.len()).copy_from(va);
        out.rows_mut(va.len(), vb.len()).copy_from(vb);
        out
    }
}

impl<A: Manifold, B: Manifold> Manifold for Product<A, B> {
    type Point = (A::Point, B::Point);

    fn dim(&self) -> usize {
        self.a.dim() + self.b.dim()
    }

    fn blocks(&self) -> Vec<usize> {
        let mut blocks = self.a.blocks();
        blocks.extend(self.b.blocks());
        blocks
    }

    fn ambient_dim(&self) -> usize {
        self.a.ambient_dim() + self.b.ambient_dim()
    }

    fn inner(&self, theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64 {
        let (ua, ub) = self.split(u);
        let (va, vb) = self.split(v);
        self.a.inner(&theta.0, &ua, &va) + self.b.inner(&theta.1, &ub, &vb)
    }

    fn metric_apply(&self, theta: &Self::Point, u: &Tangent) -> Tangent {
        let (ua, ub) = self.split(u);
        self.join(
            &self.a.metric_apply(&theta.0, &ua),
            &self.b.metric_apply(&theta.1, &ub),
        )
    }

    fn metric_solve(&self, theta: &Self::Point, u: &Tangent) -> Tangent {
        let (ua, ub) = self.split(u);
        self.join(
            &self.a.metric_solve(&theta.0, &ua),
            &self.b.metric_solve(&theta.1, &ub),
        )
    }

    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point> {
        let (va, vb) = self.split(v);
        Ok((
            self.a.retract(&theta.0, &va)?,
            self.b.retract(&theta.1, &vb)?,
        ))
    }

    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent> {
        Ok(self.join(
            &self.a.inverse_retract(&a.0, &b.0)?,
            &self.b.inverse_retract(&a.1, &b.1)?,
        ))
    }

    fn transport(&self, a: &Self::Point, b: &Self::Point, u: &Tangent) -> Result<Tangent> {
        let (ua, ub) = self.split(u);
        Ok(self.join(
            &self.a.transport(&a.0, &b.0, &ua)?,
            &self.b.transport(&a.1, &b.1, &ub)?,
        ))
    }

    fn transport_adjoint(
        &self,
        a: &Self::Point,
        b: &Self::Point,
        w: &Tangent,
    ) -> Result<Tangent> {
        let (wa, wb) = self.split(w);
        Ok(self.join(
            &self.a.transport_adjoint(&a.0, &b.0, &wa)?,
            &self.b.transport_adjoint(&a.1, &b.1, &wb)?,
        ))
    }

    fn transport_is_isometric(&self) -> bool {
        self.a.transport_is_isometric() && self.b.transport_is_isometric()
    }

    fn project(&self, theta: &Self::Point, ambient: &DVector<f64>) -> Tangent {
        let (za, zb) = self.split_ambient(ambient);
        self.join(
            &self.a.project(&theta.0, &za),
            &self.b.project(&theta.1, &zb),
        )
    }

    fn embed_point(&self, theta: &Self::Point) -> DVector<f64> {
        self.join(&self.a.embed_point(&theta.0), &self.b.embed_point(&theta.1))
    }

    fn embed_tangent(&self, theta: &Self::Point, u: &Tangent) -> DVector<f64> {
        let (ua, ub) = self.split(u);
        self.join(
            &self.a.embed_tangent(&theta.0, &ua),
            &self.b.embed_tangent(&theta.1, &ub),
        )
    }

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64 {
        self.a
            .distance(&a.0, &b.0)
            .hypot(self.b.distance(&a.1, &b.1))
    }

    fn exact_exp(&self, theta: &Self::Point, v: &Tangent) -> Option<Result<Self::Point>> {
        let (va, vb) = self.split(v);
        let pa = self.a.exact_exp(&theta.0, &va)?;
        let pb = self.b.exact_exp(&theta.1, &vb)?;
        Some(match (pa, pb) {
            (Ok(x), Ok(y)) => Ok((x, y)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        })
    }

    fn step_maps_along(
        &self,
        old: &Self::Point,
        v: &Tangent,
        new: &Self::Point,
    ) -> Result<Box<dyn TransportMaps + '_>> {
        let (va, vb) = self.split(v);
        Ok(Box::new(ProductMaps {
            a: self.a.step_maps_along(&old.0, &va, &new.0)?,
            b: self.b.step_maps_along(&old.1, &vb, &new.1)?,
            dim_a: self.a.dim(),
            dim_b: self.b.dim(),
        }))
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point {
        (self.a.random_point(rng), self.b.random_point(rng))
    }
}

struct ProductMaps<'m> {
    a: Box<dyn TransportMaps + 'm>,
    b: Box<dyn TransportMaps + 'm>,
    dim_a: usize,
    dim_b: usize,
}

impl ProductMaps<'_> {
    fn map_blocks(
        &self,
        v: &Tangent,
        f: impl Fn(&dyn TransportMaps, &Tangent) -> Result<Tangent>,
    ) -> Result<Tangent> {
        let va = DVector::from(v.rows(0, self.dim_a).clone_owned());
        let vb = DVector::from(v.rows(self.dim_a, self.dim_b).clone_owned());
        let ra = f(self.a.as_ref(), &va)?;
        let rb = f(self.b.as_ref(), &vb)?;
        let mut out = DVector::zeros(self.dim_a + self.dim_b);
        out.rows_mut(0, self.dim_a).copy_from(&ra);
        out.rows_mut(self.dim_a, self.dim_b).copy_from(&rb);
        Ok(out)
    }
}

impl TransportMaps for ProductMaps<'_> {
    fn forward(&self, u: &Tangent) -> Result<Tangent> {
        self.map_blocks(u, |m, v| m.forward(v))
    }

    fn backward(&self, w: &Tangent) -> Result<Tangent> {
        self.map_blocks(w, |m, v| m.backward(v))
    }

    fn backward_adjoint(&self, u: &Tangent) -> Result<Tangent> {
        self.map_blocks(u, |m, v| m.backward_adjoint(v))
    }

    fn forward_inv_adjoint(&self, u: &Tangent) -> Result<Tangent> {
        self.map_blocks(u, |m, v| m.forward_inv_adjoint(v))
    }

    fn isometric(&self) -> bool {
        self.a.isometric() && self.b.isometric()
    }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// `retract(θ, 0)` must return `θ` to this ambient tolerance (relative to
/// `max(1, ‖θ‖)`).
pub const RETRACT_ZERO_TOL: f64 = 1e-12;
/// The finite-difference differential of the retraction at zero must match
/// the embedded tangent to this relative tolerance.
pub const RETRACT_DIFFERENTIAL_TOL: f64 = 1e-5;
/// Central-difference step scale: `h = FD_STEP_SCALE * max(1, ‖θ‖)`.
pub const FD_STEP_SCALE: f64 = 1e-6;
/// Minimum log-log slope of `‖R(tv) − Exp(tv)‖` vs `t` for a retraction to
/// count as second-order accurate against an exact exponential.
pub const SECOND_ORDER_SLOPE_MIN: f64 = 2.7;
/// Distances below this (relative) level are treated as an exact match and
/// skip the slope fit.
pub const EXACT_MATCH_TOL: f64 = 1e-13;
/// Transporting along a zero step must be the identity to this relative
/// tolerance.
pub const TRANSPORT_IDENTITY_TOL: f64 = 1e-12;
/// Adjoint pairing `⟨T u, w⟩_b = ⟨u, T* w⟩_a` must hold to this relative
/// tolerance.
pub const TRANSPORT_ADJOINT_TOL: f64 = 1e-9;
/// Isometric transports must preserve `‖u‖²` to this relative tolerance.
pub const TRANSPORT_ISOMETRY_TOL: f64 = 1e-9;

/// Outcome of [`check_retraction_axioms`].
#[derive(Debug, Clone)]
pub struct RetractionReport {
    /// Ambient distance between `retract(θ, 0)` and `θ`, relative to
    /// `max(1, ‖θ‖)`.
    pub zero_error: f64,
    /// Relative error of the central-difference differential of the
    /// retraction at zero against the embedded tangent.
    pub differential_error: f64,
    /// Log-log slope of the retraction-vs-exponential gap over
    /// `t ∈ {1e-1, 1e-2, 1e-3}`; `None` when the backend has no exact
    /// exponential or matches it to rounding (see `exact_match`).
    pub order_slope: Option<f64>,
    /// Set when the retraction reproduced the exact exponential to rounding
    /// at every probe step.
    pub exact_match: bool,
}

impl RetractionReport {
    /// All checks within tolerance.
    pub fn passes(&self) -> bool {
        self.zero_error <= RETRACT_ZERO_TOL
            && self.differential_error <= RETRACT_DIFFERENTIAL_TOL
            && match self.order_slope {
                Some(s) => s >= SECOND_ORDER_SLOPE_MIN,
                None => true,
            }
    }
}

/// Verifies the retraction contract at `θ` along tangent direction `v`:
/// `R(0) = θ`, the differential of `R` at zero is the identity (checked by
/// central differences in the ambient embedding), and — where the backend
/// offers an exact exponential — the retraction agrees with it to second
/// order along `v`.
///
/// # Errors
///
/// Propagates retraction failures at the probe points.
pub fn check_retraction_axioms<M: Manifold>(
    m: &M,
    theta: &M::Point,
    v: &Tangent,
) -> Result<RetractionReport> {
    let theta_emb = m.embed_point(theta);
    let point_scale = theta_emb.norm().max(1.0);

    let zero = DVector::zeros(m.dim());
    let r0 = m.retract(theta, &zero)?;
    let zero_error = (m.embed_point(&r0) - &theta_emb).norm() / point_scale;

    // Unit-speed direction for the differential and order probes.
    let vnorm = m.norm(theta, v);
    if vnorm == 0.0 {
        return Err(GeometryError::InvalidInput(
            "retraction check needs a nonzero tangent direction".into(),
        ));
    }
    let u = v / vnorm;

    let h = FD_STEP_SCALE * point_scale;
    let plus = m.embed_point(&m.retract(theta, &(&u * h))?);
    let minus = m.embed_point(&m.retract(theta, &(&u * -h))?);
    let fd = (plus - minus) / (2.0 * h);
    let want = m.embed_tangent(theta, &u);
    let differential_error = (fd - &want).norm() / want.norm().max(1e-12);

    let mut order_slope = None;
    let mut exact_match = false;
    if m.exact_exp(theta, &u).is_some() {
        let ts = [1e-1, 1e-2, 1e-3];
        let mut gaps = Vec::with_capacity(ts.len());
        for &t in &ts {
            let step = &u * t;
            let r = m.retract(theta, &step)?;
            let e = m.exact_exp(theta, &step).expect("probed above")?;
            gaps.push((m.embed_point(&r) - m.embed_point(&e)).norm());
        }
        if gaps.iter().all(|&g| g <= EXACT_MATCH_TOL * point_scale) {
            exact_match = true;
        } else {
            let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
            let ys: Vec<f64> = gaps.iter().map(|g| g.max(1e-300).ln()).collect();
            order_slope = Some(log_log_slope(&xs, &ys));
        }
    }

    Ok(RetractionReport {
        zero_error,
        differential_error,
        order_slope,
        exact_match,
    })
}

/// Outcome of [`check_transport_consistency`].
#[derive(Debug, Clone)]
pub struct TransportReport {
    /// Relative error of `transport(θ, θ, u)` against `u`.
    pub identity_error: f64,
    /// Relative defect of the adjoint pairing
    /// `⟨T u, w⟩_b − ⟨u, T* w⟩_a`.
    pub adjoint_error: f64,
    /// Relative defect of `‖T u‖²_b` against `‖u‖²_a`; `None` when the
    /// backend does not claim isometry.
    pub isometry_error: Option<f64>,
}

impl TransportReport {
    /// All checks within tolerance.
    pub fn passes(&self) -> bool {
        self.identity_error <= TRANSPORT_IDENTITY_TOL
            && self.adjoint_error <= TRANSPORT_ADJOINT_TOL
            && match self.isometry_error {
                Some(e) => e <= TRANSPORT_ISOMETRY_TOL,
                None => true,
            }
    }
}

/// Verifies the transport contract between `a` and `b`: transport along a
/// zero step is the identity, the adjoint pairing holds against
/// [`Manifold::transport_adjoint`], and inner products are preserved when
/// the backend claims an isometric transport.
///
/// `u` is a tangent at `a`; `w` is a tangent at `b`.
///
/// # Errors
///
/// Propagates transport failures.
pub fn check_transport_consistency<M: Manifold>(
    m: &M,
    a: &M::Point,
    b: &M::Point,
    u: &Tangent,
    w: &Tangent,
) -> Result<TransportReport> {
    let u_norm = m.norm(a, u);
    let w_norm = m.norm(b, w);
    if u_norm == 0.0 || w_norm == 0.0 {
        return Err(GeometryError::InvalidInput(
            "transport check needs nonzero tangents".into(),
        ));
    }

    let same = m.transport(a, a, u)?;
    let identity_error = (&same - u).norm() / u.norm();

    let tu = m.transport(a, b, u)?;
    let aw = m.transport_adjoint(a, b, w)?;
    let lhs = m.inner(b, &tu, w);
    let rhs = m.inner(a, u, &aw);
    let adjoint_error = (lhs - rhs).abs() / (u_norm * w_norm).max(1e-300);

    let isometry_error = if m.transport_is_isometric() {
        let before = m.inner(a, u, u);
        let after = m.inner(b, &tu, &tu);
        Some((after - before).abs() / before.max(1e-300))
    } else {
        None
    };

    Ok(TransportReport {
        identity_error,
        adjoint_error,
        isometry_error,
    })
}

/// Least-squares slope of `ys` against `xs` (both already in log space for
/// order-of-accuracy fits).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}
