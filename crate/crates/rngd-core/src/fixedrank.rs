//! Fixed-rank matrices in factored SVD form.
//!
//! A point of the rank-`r` manifold in `ℝ^{m×n}` is stored as
//! `X = U diag(σ) Vᵀ` with orthonormal `U` (`m×r`) and `V` (`n×r`) and
//! positive, non-increasing singular values `σ`. A tangent at `X` is the
//! triple `(M, U_p, V_p)` with `UᵀU_p = 0` and `VᵀV_p = 0`, embedded as
//!
//! `ξ = U M Vᵀ + U_p Vᵀ + U V_pᵀ`.
//!
//! Chart coordinates concatenate `[vec(M) | vec(U_p) | vec(V_p)]`, giving
//! the named blocks `[r², m·r, n·r]`. The metric is the sum of Frobenius
//! inner products, which equals the ambient trace metric of the embeddings
//! (the cross terms vanish by the orthogonality constraints), so the chart
//! Gram operator is the identity.
//!
//! The retraction maps `X + ξ` to its best rank-`r` approximation. The
//! factored form `[U, U_p] K [V, V_p]ᵀ` with
//! `K = [[diag(σ)+M, I], [I, 0]]` reduces that to two thin QR passes and a
//! `2r×2r` SVD — `O((m+n) r²)` total. Transport is the orthogonal
//! projection onto the destination tangent space; it is self-adjoint in the
//! ambient metric, so its metric adjoint is the reverse projection and the
//! transport is *not* isometric.
//!
//! Blockwise state transport keeps only the diagonal blocks of the
//! projection transport (the couplings between `M`, `U_p` and `V_p` are
//! dropped by design); [`fr_block_transport`] implements the three diagonal
//! blocks in closed form, and the tests pin them against a materialized
//! transport matrix with the cross blocks zeroed. The dropped coupling is a
//! deliberate structural approximation, not an oversight — the tests
//! document its size rather than hiding it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::truncated_svd;
use crate::manifold::{GeometryError, Manifold, Result, Tangent};

/// Relative singular-value floor: a retraction whose `r`-th singular value
/// falls below `RANK_COLLAPSE_REL · σ₁` fails with
/// [`GeometryError::RankCollapse`].
pub const RANK_COLLAPSE_REL: f64 = 1e-12;

/// A rank-`r` matrix in factored SVD form.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedRankPoint {
    /// Left singular vectors, `m×r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Singular values, positive and non-increasing.
    pub sigma: DVector<f64>,
    /// Right singular vectors, `n×r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl FixedRankPoint {
    /// Validates factor shapes, orthonormality, and the singular-value
    /// ordering.
    ///
    /// # Errors
    ///
    /// [`GeometryError::InvalidInput`] on malformed factors.
    pub fn new(u: DMatrix<f64>, sigma: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        let r = sigma.len();
        if u.ncols() != r || v.ncols() != r {
            return Err(GeometryError::InvalidInput(format!(
                "factor widths ({}, {}) must equal the rank {r}",
                u.ncols(),
                v.ncols()
            )));
        }
        for f in [&u, &v] {
            let drift = (f.transpose() * f - DMatrix::identity(r, r)).norm();
            if drift > 1e-8 {
                return Err(GeometryError::InvalidInput(format!(
                    "factor columns must be orthonormal (drift {drift:.3e})"
                )));
            }
        }
        for i in 0..r {
            if sigma[i] <= 0.0 || !sigma[i].is_finite() {
                return Err(GeometryError::InvalidInput(
                    "singular values must be positive and finite".into(),
                ));
            }
            if i > 0 && sigma[i] > sigma[i - 1] {
                return Err(GeometryError::InvalidInput(
                    "singular values must be non-increasing".into(),
                ));
            }
        }
        Ok(Self { u, sigma, v })
    }

    /// Rank `r`.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Dense embedding `U diag(σ) Vᵀ`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.u.nrows(), self.rank(), |i, j| {
            self.u[(i, j)] * self.sigma[j]
        });
        scaled * self.v.transpose()
    }
}

/// A fixed-rank tangent triple.
#[derive(Debug, Clone)]
pub struct FrTangent {
    /// Core block, `r×r` (unconstrained).
    pub m: DMatrix<f64>,
    /// Left complement block, `m×r`, with `UᵀU_p = 0`.
    pub up: DMatrix<f64>,
    /// Right complement block, `n×r`, with `VᵀV_p = 0`.
    pub vp: DMatrix<f64>,
}

impl FrTangent {
    /// Dense embedding `U M Vᵀ + U_p Vᵀ + U V_pᵀ` at the given point.
    pub fn embed(&self, at: &FixedRankPoint) -> DMatrix<f64> {
        &at.u * &self.m * at.v.transpose() + &self.up * at.v.transpose()
            + &at.u * self.vp.transpose()
    }
}

/// The manifold of `m×n` matrices of fixed rank `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedRank {
    m: usize,
    n: usize,
    r: usize,
}

/// Packs a tangent triple into chart coordinates
/// `[vec(M) | vec(U_p) | vec(V_p)]`.
pub fn fr_chart_pack(t: &FrTangent) -> Tangent {
    let (r2, mr, nr) = (
        t.m.len(),
        t.up.len(),
        t.vp.len(),
    );
    let mut out = DVector::zeros(r2 + mr + nr);
    out.rows_mut(0, r2).copy_from_slice(t.m.as_slice());
    out.rows_mut(r2, mr).copy_from_slice(t.up.as_slice());
    out.rows_mut(r2 + mr, nr).copy_from_slice(t.vp.as_slice());
    out
}

/// Unpacks chart coordinates into a tangent triple.
pub fn fr_chart_unpack(m: usize, n: usize, r: usize, t: &Tangent) -> FrTangent {
    debug_assert_eq!(t.len(), r * r + m * r + n * r);
    FrTangent {
        m: DMatrix::from_column_slice(r, r, t.rows(0, r * r).as_slice()),
        up: DMatrix::from_column_slice(m, r, t.rows(r * r, m * r).as_slice()),
        vp: DMatrix::from_column_slice(n, r, t.rows(r * r + m * r, n * r).as_slice()),
    }
}

/// Projects a dense ambient matrix onto the tangent space at `x`:
/// `M = UᵀZV`, `U_p = (I − UUᵀ)ZV`, `V_p = (I − VVᵀ)ZᵀU`.
pub fn fr_project(x: &FixedRankPoint, z: &DMatrix<f64>) -> FrTangent {
    let zv = z * &x.v;
    let ztu = z.transpose() * &x.u;
    let m = x.u.transpose() * &zv;
    let up = &zv - &x.u * &m;
    let vp = &ztu - &x.v * (x.v.transpose() * &ztu);
    FrTangent { m, up, vp }
}

/// Diagonal-block transport of a tangent triple from `from` to `to`:
///
/// - `M̃ = (ŨᵀU) M (VᵀṼ)`
/// - `Ũ_p = (I − ŨŨᵀ) U_p (VᵀṼ)`
/// - `Ṽ_p = (I − ṼṼᵀ) V_p (UᵀŨ)`
///
/// These are exactly the diagonal blocks of the projection transport; the
/// cross-block couplings are dropped.
pub fn fr_block_transport(
    from: &FixedRankPoint,
    to: &FixedRankPoint,
    t: &FrTangent,
) -> FrTangent {
    let ut_u = to.u.transpose() * &from.u; // ŨᵀU, r×r
    let vt_v = from.v.transpose() * &to.v; // VᵀṼ, r×r
    let m = &ut_u * &t.m * &vt_v;
    let up_carried = &t.up * &vt_v;
    let up = &up_carried - &to.u * (to.u.transpose() * &up_carried);
    let vp_carried = &t.vp * ut_u.transpose(); // V_p (UᵀŨ)
    let vp = &vp_carried - &to.v * (to.v.transpose() * &vp_carried);
    FrTangent { m, up, vp }
}

impl FixedRank {
    /// Rank-`r` matrices in `ℝ^{m×n}`, `1 <= r <= min(m, n)`.
    ///
    /// # Panics
    ///
    /// Panics if the rank is out of range (a configuration bug).
    pub fn new(m: usize, n: usize, r: usize) -> Self {
        assert!(
            r >= 1 && r <= m.min(n),
            "rank {r} out of range for {m}x{n} matrices"
        );
        Self { m, n, r }
    }

    /// Ambient rows `m`.
    pub fn nrows(&self) -> usize {
        self.m
    }

    /// Ambient columns `n`.
    pub fn ncols(&self) -> usize {
        self.n
    }

    /// Rank `r`.
    pub fn rank(&self) -> usize {
        self.r
    }

    fn check_tangent(&self, t: &Tangent) -> Result<()> {
        let want = self.r * self.r + self.m * self.r + self.n * self.r;
        if t.len() != want {
            return Err(GeometryError::DimensionMismatch {
                expected: want,
                got: t.len(),
            });
        }
        Ok(())
    }

    /// Factored retraction: the best rank-`r` approximation of `X + ξ` in
    /// `O((m+n) r²)`.
    ///
    /// # Errors
    ///
    /// [`GeometryError::RankCollapse`] when the retained spectrum collapses
    /// below [`RANK_COLLAPSE_REL`] relative to the leading singular value.
    pub fn retract_triple(&self, x: &FixedRankPoint, t: &FrTangent) -> Result<FixedRankPoint> {
        let r = self.r;
        let mut left = DMatrix::zeros(self.m, 2 * r);
        left.columns_mut(0, r).copy_from(&x.u);
        left.columns_mut(r, r).copy_from(&t.up);
        let mut right = DMatrix::zeros(self.n, 2 * r);
        right.columns_mut(0, r).copy_from(&x.v);
        right.columns_mut(r, r).copy_from(&t.vp);

        let qr_l = left.qr();
        let qr_r = right.qr();
        let (qu, ru) = (qr_l.q(), qr_l.r());
        let (qv, rv) = (qr_r.q(), qr_r.r());

        // K = [[diag(σ)+M, I], [I, 0]]: X + ξ = [U, U_p] K [V, V_p]ᵀ exactly.
        let mut k = DMatrix::zeros(2 * r, 2 * r);
        for j in 0..r {
            for i in 0..r {
                k[(i, j)] = t.m[(i, j)];
            }
            k[(j, j)] += x.sigma[j];
            k[(j, r + j)] = 1.0;
            k[(r + j, j)] = 1.0;
        }

        let core = &ru * k * rv.transpose();
        let tsvd = truncated_svd(&core, r).map_err(GeometryError::from)?;
        let sigma_1 = tsvd.sigma[0];
        let sigma_r = tsvd.sigma[r - 1];
        if sigma_1 <= 0.0 || sigma_r < RANK_COLLAPSE_REL * sigma_1 {
            return Err(GeometryError::RankCollapse { sigma_r, sigma_1 });
        }
        Ok(FixedRankPoint {
            u: &qu * &tsvd.u,
            sigma: tsvd.sigma,
            v: &qv * &tsvd.v,
        })
    }
}

impl Manifold for FixedRank {
    type Point = FixedRankPoint;

    fn dim(&self) -> usize {
        self.r * self.r + self.m * self.r + self.n * self.r
    }

    fn blocks(&self) -> Vec<usize> {
        vec![self.r * self.r, self.m * self.r, self.n * self.r]
    }

    fn ambient_dim(&self) -> usize {
        self.m * self.n
    }

    fn inner(&self, _theta: &Self::Point, u: &Tangent, v: &Tangent) -> f64 {
        u.dot(v)
    }

    fn metric_apply(&self, _theta: &Self::Point, u: &Tangent) -> Tangent {
        u.clone()
    }

    fn retract(&self, theta: &Self::Point, v: &Tangent) -> Result<Self::Point> {
        self.check_tangent(v)?;
        let t = fr_chart_unpack(self.m, self.n, self.r, v);
        self.retract_triple(theta, &t)
    }

    /// Leading-order inverse: the projection of the ambient difference
    /// `Y − X` onto the tangent space at `X`. `retract(a, inverse_retract(a,
    /// b))` reproduces `b` up to `O(‖b − a‖²)`; the tests pin that order.
    fn inverse_retract(&self, a: &Self::Point, b: &Self::Point) -> Result<Tangent> {
        let diff = b.to_dense() - a.to_dense();
        Ok(fr_chart_pack(&fr_project(a, &diff)))
    }

    fn transport(&self, a: &Self::Point, b: &Self::Point, u: &Tangent) -> Result<Tangent> {
        self.check_tangent(u)?;
        let t = fr_chart_unpack(self.m, self.n, self.r, u);
        Ok(fr_chart_pack(&fr_project(b, &t.embed(a))))
    }

    fn transport_adjoint(&self, a: &Self::Point, b: &Self::Point, w: &Tangent) -> Result<Tangent> {
        // The projection transport is self-adjoint in the ambient metric,
        // so the metric adjoint is the reverse projection.
        self.transport(b, a, w)
    }

    fn transport_is_isometric(&self) -> bool {
        false
    }

    fn project(&self, theta: &Self::Point, ambient: &DVector<f64>) -> Tangent {
        let z = DMatrix::from_column_slice(self.m, self.n, ambient.as_slice());
        fr_chart_pack(&fr_project(theta, &z))
    }

    fn embed_point(&self, theta: &Self::Point) -> DVector<f64> {
        DVector::from_column_slice(theta.to_dense().as_slice())
    }

    fn embed_tangent(&self, theta: &Self::Point, u: &Tangent) -> DVector<f64> {
        let t = fr_chart_unpack(self.m, self.n, self.r, u);
        DVector::from_column_slice(t.embed(theta).as_slice())
    }

    fn distance(&self, a: &Self::Point, b: &Self::Point) -> f64 {
        (a.to_dense() - b.to_dense()).norm()
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point {
        let gu = DMatrix::from_fn(self.m, self.r, |_, _| StandardNormal.sample(rng));
        let gv = DMatrix::from_fn(self.n, self.r, |_, _| StandardNormal.sample(rng));
        let u = crate::stiefel::st_reorthonormalize(&gu);
        let v = crate::stiefel::st_reorthonormalize(&gv);
        let mut sigma: Vec<f64> = (0..self.r).map(|_| rng.gen_range(0.5..2.0)).collect();
        sigma.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        FixedRankPoint {
            u,
            sigma: DVector::from_vec(sigma),
            v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{check_retraction_axioms, check_transport_consistency, log_log_slope};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn manifold() -> FixedRank {
        FixedRank::new(6, 5, 2)
    }

    fn random_tangent_triple(
        m: &FixedRank,
        x: &FixedRankPoint,
        rng: &mut StdRng,
    ) -> FrTangent {
        let t = m.random_tangent(x, rng);
        fr_chart_unpack(m.nrows(), m.ncols(), m.rank(), &t)
    }

    #[test]
    fn chart_inner_matches_ambient_trace_metric() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let x = m.random_point(&mut rng);
            let a = m.random_tangent(&x, &mut rng);
            let b = m.random_tangent(&x, &mut rng);
            let chart = m.inner(&x, &a, &b);
            let ta = fr_chart_unpack(6, 5, 2, &a).embed(&x);
            let tb = fr_chart_unpack(6, 5, 2, &b).embed(&x);
            let ambient = (ta.transpose() * tb).trace();
            assert!(
                (chart - ambient).abs() <= 1e-10 * ambient.abs().max(1.0),
                "chart {chart} vs ambient {ambient}"
            );
        }
    }

    #[test]
    fn projection_is_idempotent_with_orthogonal_residual() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let x = m.random_point(&mut rng);
            let z = DMatrix::from_fn(6, 5, |_, _| StandardNormal.sample(&mut rng));
            let p1 = fr_project(&x, &z);
            let p2 = fr_project(&x, &p1.embed(&x));
            let drift = (fr_chart_pack(&p2) - fr_chart_pack(&p1)).norm();
            assert!(drift <= 1e-10 * fr_chart_pack(&p1).norm().max(1.0));
            // The residual Z − embed(P(Z)) is ambient-orthogonal to every
            // tangent vector.
            let resid = &z - p1.embed(&x);
            let probe = random_tangent_triple(&m, &x, &mut rng).embed(&x);
            let angle = (resid.transpose() * &probe).trace().abs();
            assert!(angle <= 1e-9 * resid.norm() * probe.norm());
        }
    }

    #[test]
    fn retraction_matches_dense_truncated_svd() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let x = m.random_point(&mut rng);
            let t = random_tangent_triple(&m, &x, &mut rng);
            let y = m.retract_triple(&x, &t).unwrap();
            let dense = x.to_dense() + t.embed(&x);
            let oracle = truncated_svd(&dense, 2).unwrap().reconstruct();
            let err = (y.to_dense() - &oracle).norm();
            assert!(err <= 1e-9 * oracle.norm(), "oracle gap {err:.3e}");
        }
    }

    #[test]
    fn retraction_is_the_best_rank_r_approximation() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(4);
        let x = m.random_point(&mut rng);
        let t = random_tangent_triple(&m, &x, &mut rng);
        let y = m.retract_triple(&x, &t).unwrap();
        let target = x.to_dense() + t.embed(&x);
        let best = (y.to_dense() - &target).norm();
        for _ in 0..20 {
            let competitor = m.random_point(&mut rng).to_dense();
            let other = (competitor - &target).norm();
            assert!(best <= other + 1e-12, "best {best:.6} vs {other:.6}");
        }
    }

    #[test]
    fn retraction_axioms_pass() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let x = m.random_point(&mut rng);
            let v = m.random_tangent(&x, &mut rng);
            let report = check_retraction_axioms(&m, &x, &v).unwrap();
            assert!(report.passes(), "{report:?}");
        }
    }

    #[test]
    fn retraction_is_first_order_against_the_ambient_line() {
        // ‖R(tv) − (X + t·embed v)‖ = O(t²): slope ≈ 2 on a log-log fit.
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(6);
        let x = m.random_point(&mut rng);
        let v = m.random_tangent(&x, &mut rng);
        let unit = &v / v.norm();
        let emb = fr_chart_unpack(6, 5, 2, &unit).embed(&x);
        let ts = [1e-1, 1e-2, 1e-3];
        let gaps: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let r = m.retract(&x, &(&unit * t)).unwrap();
                (r.to_dense() - (x.to_dense() + &emb * t)).norm()
            })
            .collect();
        let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
        let ys: Vec<f64> = gaps.iter().map(|g| g.max(1e-300).ln()).collect();
        let slope = log_log_slope(&xs, &ys);
        assert!(slope >= 1.9, "slope {slope:.3}");
    }

    #[test]
    fn rank_collapse_is_detected() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(7);
        let x = m.random_point(&mut rng);
        // M = −diag(σ), U_p = V_p = 0 drives X + ξ to zero.
        let t = FrTangent {
            m: -DMatrix::from_diagonal(&x.sigma),
            up: DMatrix::zeros(6, 2),
            vp: DMatrix::zeros(5, 2),
        };
        assert!(matches!(
            m.retract_triple(&x, &t),
            Err(GeometryError::RankCollapse { .. })
        ));
    }

    #[test]
    fn transport_adjoint_and_idempotence() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..20 {
            let a = m.random_point(&mut rng);
            let b = m.random_point(&mut rng);
            let u = m.random_tangent(&a, &mut rng);
            let w = m.random_tangent(&b, &mut rng);
            let report = check_transport_consistency(&m, &a, &b, &u, &w).unwrap();
            assert!(report.passes(), "{report:?}");
            // Idempotence at the same point: tangents are fixed points.
            let same = m.transport(&a, &a, &u).unwrap();
            assert!((&same - &u).norm() <= 1e-10 * u.norm());
        }
    }

    #[test]
    fn block_transport_matches_zeroed_cross_block_oracle() {
        // Materialize the full projection transport on a small instance,
        // zero the off-diagonal blocks, and compare against the closed-form
        // diagonal-block transport.
        let m = FixedRank::new(4, 3, 2);
        let mut rng = StdRng::seed_from_u64(9);
        let a = m.random_point(&mut rng);
        let b = m.random_point(&mut rng);
        let dim = m.dim();
        let blocks = m.blocks();
        // Column-by-column dense transport matrix.
        let mut t_full = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = DVector::zeros(dim);
            e[j] = 1.0;
            let col = m.transport(&a, &b, &e).unwrap();
            t_full.set_column(j, &col);
        }
        // Zero the cross blocks.
        let mut t_blocked = t_full.clone();
        let offsets: Vec<usize> = blocks
            .iter()
            .scan(0usize, |acc, &b| {
                let start = *acc;
                *acc += b;
                Some(start)
            })
            .collect();
        for (bi, &oi) in offsets.iter().enumerate() {
            for (bj, &oj) in offsets.iter().enumerate() {
                if bi != bj {
                    for i in oi..oi + blocks[bi] {
                        for j in oj..oj + blocks[bj] {
                            t_blocked[(i, j)] = 0.0;
                        }
                    }
                }
            }
        }
        // Closed-form block transport applied to random tangents.
        for _ in 0..10 {
            let u = m.random_tangent(&a, &mut rng);
            let want = &t_blocked * &u;
            let triple = fr_chart_unpack(4, 3, 2, &u);
            let got = fr_chart_pack(&fr_block_transport(&a, &b, &triple));
            assert!(
                (&got - &want).norm() <= 1e-12 * want.norm().max(1.0),
                "block transport mismatch {:.3e}",
                (&got - &want).norm()
            );
        }
        // The dropped coupling is real: the full and blocked operators
        // genuinely differ on generic point pairs.
        assert!((&t_full - &t_blocked).norm() > 1e-6);
    }

    #[test]
    fn inverse_retract_is_second_order_accurate() {
        let m = manifold();
        let mut rng = StdRng::seed_from_u64(10);
        let x = m.random_point(&mut rng);
        let v = m.random_tangent(&x, &mut rng);
        let unit = &v / v.norm();
        let mut errs = Vec::new();
        let ts = [1e-1, 1e-2];
        for &t in &ts {
            let y = m.retract(&x, &(&unit * t)).unwrap();
            let back = m.inverse_retract(&x, &y).unwrap();
            errs.push((back - &unit * t).norm());
        }
        // O(t²) error: shrinking t by 10 shrinks the error by ≳ 50.
        assert!(
            errs[1] <= errs[0] / 50.0,
            "errors {errs:?} do not contract quadratically"
        );
    }
}
