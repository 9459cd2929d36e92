//! Inverse-Fisher state maintained without matrix inversions.
//!
//! Both state types track the inverse of the unnormalized score accumulator
//!
//! `Ĥ = ε·Id + Σ_k φ_k ⊗ φ_k`,
//!
//! where `φ ⊗ φ` is the metric outer product `v ↦ φ ⟨φ, v⟩_θ` and the sum
//! runs over the scores currently represented. The running-average
//! curvature estimate is `Ĥ / count`, so its inverse is recovered lazily:
//! [`DenseInvFisher::apply`] and [`WindowInvFisher::apply`] scale by
//! `count` (for the window, the current occupancy) instead of renormalizing
//! the state after every score.
//!
//! # Dense state
//!
//! [`DenseInvFisher`] stores one inverse block per named chart block of the
//! manifold (a single block when the chart is unstructured). Each score
//! triggers a Sherman–Morrison update per block:
//!
//! `A ← A − (1 + ⟨φ, Aφ⟩_θ)⁻¹ (Aφ)(G Aφ)ᵀ`,
//!
//! which costs one metric application and one rank-one update — no solves.
//! Cross-block curvature is dropped by construction; that is the point of
//! the block layout, not an approximation error to fix. State transport
//! conjugates each block with the step's backward transport and its metric
//! adjoint, restricted to the block.
//!
//! # Sliding-window state
//!
//! [`WindowInvFisher`] represents the inverse over the `K` most recent
//! scores as an identity-plus-low-rank form
//!
//! `Ĥ⁻¹ = (1/ε)·Id − Σ_k c_k μ_k ⟨ν_k, ·⟩_θ`,
//!
//! ordered so the *newest* score is the innermost rank-one correction
//! (index 0) and the oldest is the outermost (tail). Discarding the oldest
//! score is then exact and free — drop the tail triple — while inserting a
//! new score rewrites every stored triple once via an `O(K)` recursion with
//! two metric applications total. Transport moves each `μ` by the forward
//! map and each `ν` by the inverse-adjoint map, which keeps the `(1/ε)·Id`
//! part intact; for non-isometric backends without a closed-form
//! inverse-adjoint the transport falls back to one dense materialization of
//! the forward map per step.
//!
//! # Invariants
//!
//! - Update denominators stay at or above one for a positive state and a
//!   real score; violations surface as [`FisherError::BrokenInvariant`]
//!   rather than silently corrupting the state.
//! - Checkpoints round-trip bit-exactly (little-endian, versioned header).

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::manifold::{GeometryError, Manifold, Tangent, TransportMaps};

/// Slack below the theoretical lower bound of one tolerated in dense
/// Sherman–Morrison denominators before the state is declared corrupt.
pub const DENSE_DENOMINATOR_SLACK: f64 = 1e-9;

/// Absolute floor for sliding-window recursion denominators.
pub const WINDOW_DENOMINATOR_MIN: f64 = 1e-12;

/// Relative singular-value cutoff used when pseudo-inverting a
/// materialized transport. Charts with gauge redundancy (e.g. the
/// factored low-rank parameterization, where several coordinate
/// directions describe the same matrix) have structurally
/// rank-deficient transports, so the fallback solve must ignore the
/// annihilated directions rather than amplify noise along them.
pub const TRANSPORT_PINV_CUTOFF: f64 = 1e-12;

/// Checkpoint file magic.
const MAGIC: &[u8; 8] = b"RNGDIFSH";

/// Checkpoint format version.
const FORMAT_VERSION: u32 = 1;

/// Errors from inverse-Fisher state maintenance.
#[derive(Debug, Error)]
pub enum FisherError {
    /// Invalid construction parameters.
    #[error("invalid inverse-Fisher configuration: {0}")]
    InvalidConfig(String),
    /// Score or gradient length does not match the state dimension.
    #[error("dimension mismatch: state has {expected}, got {got}")]
    DimensionMismatch {
        /// State dimension.
        expected: usize,
        /// Offending input length.
        got: usize,
    },
    /// A positivity or finiteness invariant failed; the state is corrupt.
    #[error("inverse-Fisher invariant violated: {0}")]
    BrokenInvariant(String),
    /// Underlying geometry operation failed.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// Checkpoint I/O failure.
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    /// Checkpoint bytes do not match the expected layout.
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Result alias for fisher-state operations.
pub type Result<T> = std::result::Result<T, FisherError>;

// ---------------------------------------------------------------------------
// Dense block-diagonal state
// ---------------------------------------------------------------------------

/// Block-diagonal dense inverse of the unnormalized score accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseInvFisher {
    blocks: Vec<DMatrix<f64>>,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
    eps: f64,
    count: u64,
}

impl DenseInvFisher {
    /// Fresh state `(ε·Id)⁻¹` with one inverse per chart block.
    ///
    /// # Errors
    ///
    /// [`FisherError::InvalidConfig`] if `eps <= 0` or the block list is
    /// empty or contains a zero.
    pub fn new(block_sizes: &[usize], eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(FisherError::InvalidConfig(format!(
                "damping must be positive and finite, got {eps}"
            )));
        }
        if block_sizes.is_empty() || block_sizes.contains(&0) {
            return Err(FisherError::InvalidConfig(
                "block sizes must be non-empty and positive".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(block_sizes.len());
        let mut dim = 0;
        for &s in block_sizes {
            offsets.push(dim);
            dim += s;
        }
        let blocks = block_sizes
            .iter()
            .map(|&s| DMatrix::identity(s, s) / eps)
            .collect();
        Ok(Self {
            blocks,
            sizes: block_sizes.to_vec(),
            offsets,
            dim,
            eps,
            count: 0,
        })
    }

    /// Fresh unblocked state over a `dim`-dimensional chart.
    pub fn unblocked(dim: usize, eps: f64) -> Result<Self> {
        Self::new(&[dim], eps)
    }

    /// Fresh state blocked according to the manifold's chart layout.
    pub fn for_manifold<M: Manifold>(manifold: &M, eps: f64) -> Result<Self> {
        Self::new(&manifold.blocks(), eps)
    }

    /// Chart dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Damping `ε` used at initialization.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Number of scores integrated since initialization.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Chart block sizes.
    pub fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(FisherError::DimensionMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Integrates one score by a per-block Sherman–Morrison update.
    ///
    /// Blocks where the score vanishes identically are skipped (the update
    /// is the identity there). Each non-trivial block costs one metric
    /// application and one rank-one update.
    ///
    /// # Errors
    ///
    /// [`FisherError::BrokenInvariant`] if a denominator falls below
    /// `1 − `[`DENSE_DENOMINATOR_SLACK`] or is not finite.
    pub fn sm_update<M: Manifold>(
        &mut self,
        manifold: &M,
        theta: &M::Point,
        phi: &Tangent,
    ) -> Result<()> {
        self.check_dim(phi.len())?;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let (off, size) = (self.offsets[b], self.sizes[b]);
            let phi_b = phi.rows(off, size).into_owned();
            if phi_b.iter().all(|&x| x == 0.0) {
                continue;
            }
            let y = &*block * &phi_b;
            // Metric application through the full chart keeps backends with
            // non-identity Gram operators (which are block-diagonal over
            // the same layout) on their own code path.
            let mut y_full = DVector::zeros(self.dim);
            y_full.rows_mut(off, size).copy_from(&y);
            let gy = manifold.metric_apply(theta, &y_full).rows(off, size).into_owned();
            let den = 1.0 + phi_b.dot(&gy);
            if !(den.is_finite() && den >= 1.0 - DENSE_DENOMINATOR_SLACK) {
                return Err(FisherError::BrokenInvariant(format!(
                    "dense update denominator {den} below 1 in block {b}"
                )));
            }
            // A ← A − den⁻¹ · y (Gy)ᵀ preserves metric self-adjointness.
            block.ger(-1.0 / den, &y, &gy, 1.0);
        }
        self.count += 1;
        Ok(())
    }

    /// Applies the running-average inverse: `count · (block-diagonal A) g`.
    ///
    /// Before any score has been integrated the unscaled `A = (ε·Id)⁻¹` is
    /// used as-is.
    pub fn apply(&self, g: &Tangent) -> Result<Tangent> {
        let mut out = self.apply_unscaled(g)?;
        out *= self.count.max(1) as f64;
        Ok(out)
    }

    /// Applies the unnormalized inverse `A g` without the count scaling.
    pub fn apply_unscaled(&self, g: &Tangent) -> Result<Tangent> {
        self.check_dim(g.len())?;
        let mut out = DVector::zeros(self.dim);
        for (b, block) in self.blocks.iter().enumerate() {
            let (off, size) = (self.offsets[b], self.sizes[b]);
            let g_b = g.rows(off, size);
            out.rows_mut(off, size).copy_from(&(block * g_b));
        }
        Ok(out)
    }

    /// Moves the state across a step using the given transport maps:
    /// each block is conjugated with the backward map and its adjoint,
    /// restricted to that block.
    pub fn transport_state_with(&mut self, maps: &dyn TransportMaps) -> Result<()> {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let (off, size) = (self.offsets[b], self.sizes[b]);
            // [backward] restricted to the block.
            let mut back_bb = DMatrix::zeros(size, size);
            let mut e = DVector::zeros(self.dim);
            for j in 0..size {
                e[off + j] = 1.0;
                let col = maps.backward(&e)?;
                back_bb.set_column(j, &col.rows(off, size));
                e[off + j] = 0.0;
            }
            let mid = &*block * back_bb;
            // Apply the adjoint of the backward map column-wise.
            let mut out = DMatrix::zeros(size, size);
            let mut carry = DVector::zeros(self.dim);
            for j in 0..size {
                carry.rows_mut(off, size).copy_from(&mid.column(j));
                let col = maps.backward_adjoint(&carry)?;
                out.set_column(j, &col.rows(off, size));
            }
            *block = out;
        }
        Ok(())
    }

    /// Moves the state from `from` to `to` using the manifold's point-pair
    /// transports.
    pub fn transport_state<M: Manifold>(
        &mut self,
        manifold: &M,
        from: &M::Point,
        to: &M::Point,
    ) -> Result<()> {
        let maps = manifold.step_maps(from, to)?;
        self.transport_state_with(maps.as_ref())
    }

    /// Assembles the full block-diagonal matrix (diagnostics and tests).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (b, block) in self.blocks.iter().enumerate() {
            let (off, size) = (self.offsets[b], self.sizes[b]);
            out.view_mut((off, off), (size, size)).copy_from(block);
        }
        out
    }

    /// Writes a versioned binary checkpoint.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, 0, self.dim as u64, 0, self.eps, self.count)?;
        w.write_all(&(self.sizes.len() as u64).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        for block in &self.blocks {
            for v in block.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores a state previously written by [`DenseInvFisher::save`].
    ///
    /// # Errors
    ///
    /// [`FisherError::Format`] on magic, version, tag, or layout mismatch.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let header = read_header(r)?;
        if header.tag != 0 {
            return Err(FisherError::Format(format!(
                "expected dense state (tag 0), found tag {}",
                header.tag
            )));
        }
        let n_blocks = read_u64(r)? as usize;
        let mut sizes = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            sizes.push(read_u64(r)? as usize);
        }
        let mut state = Self::new(&sizes, header.eps)?;
        if state.dim as u64 != header.dim {
            return Err(FisherError::Format(format!(
                "block sizes sum to {}, header says {}",
                state.dim, header.dim
            )));
        }
        for block in &mut state.blocks {
            for v in block.iter_mut() {
                *v = read_f64(r)?;
            }
        }
        state.count = header.count;
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Sliding-window state
// ---------------------------------------------------------------------------

/// One rank-one correction of the window representation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTriple {
    /// Scalar coefficient.
    pub c: f64,
    /// Left vector.
    pub mu: DVector<f64>,
    /// Right vector (paired through the metric).
    pub nu: DVector<f64>,
}

/// Identity-plus-low-rank inverse over the `K` most recent scores.
///
/// Triples are stored newest-first: index 0 is the innermost correction
/// (applied directly against `ε·Id`), the tail is the oldest score.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInvFisher {
    triples: VecDeque<WindowTriple>,
    dim: usize,
    cap: usize,
    eps: f64,
}

impl WindowInvFisher {
    /// Fresh empty window over a `dim`-dimensional chart keeping at most
    /// `cap` scores.
    ///
    /// # Errors
    ///
    /// [`FisherError::InvalidConfig`] if `cap == 0`, `dim == 0`, or
    /// `eps <= 0`.
    pub fn new(dim: usize, cap: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(FisherError::InvalidConfig(format!(
                "damping must be positive and finite, got {eps}"
            )));
        }
        if cap == 0 || dim == 0 {
            return Err(FisherError::InvalidConfig(
                "window capacity and dimension must be positive".into(),
            ));
        }
        Ok(Self {
            triples: VecDeque::with_capacity(cap),
            dim,
            cap,
            eps,
        })
    }

    /// Chart dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Maximum number of retained scores.
    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Damping `ε`.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Current occupancy (number of represented scores).
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    /// Whether no score is represented yet.
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Read-only view of the stored triples, newest first.
    pub fn triples(&self) -> impl Iterator<Item = &WindowTriple> {
        self.triples.iter()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(FisherError::DimensionMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Discards the oldest represented score. Exact and O(1): the oldest
    /// score is the outermost correction, so the remaining triples already
    /// represent the shortened window. Returns `false` on an empty window.
    pub fn drop_oldest(&mut self) -> bool {
        self.triples.pop_back().is_some()
    }

    /// Inserts a new score, evicting the oldest first when the window is
    /// full.
    ///
    /// The new score becomes the innermost correction; every stored triple
    /// is rewritten once by the head-insertion recursion. Costs two metric
    /// applications plus `O(K)` vector operations.
    ///
    /// # Errors
    ///
    /// [`FisherError::BrokenInvariant`] when a recursion denominator falls
    /// below [`WINDOW_DENOMINATOR_MIN`] in magnitude or turns non-finite.
    pub fn window_update<M: Manifold>(
        &mut self,
        manifold: &M,
        theta: &M::Point,
        phi: &Tangent,
    ) -> Result<()> {
        self.check_dim(phi.len())?;
        if self.triples.len() == self.cap {
            self.drop_oldest();
        }
        let w = manifold.metric_apply(theta, phi); // G φ
        let mut z = phi / self.eps;
        let mut zs = z.clone();
        for (k, t) in self.triples.iter_mut().enumerate() {
            let dz = 1.0 + w.dot(&z);
            if !(dz.is_finite() && dz.abs() > WINDOW_DENOMINATOR_MIN) {
                return Err(FisherError::BrokenInvariant(format!(
                    "window insertion denominator {dz} at depth {k}"
                )));
            }
            let d = 1.0 / dz;
            let a = w.dot(&t.mu); // ⟨φ, μ⟩_θ
            let b = w.dot(&t.nu); // ⟨φ, ν⟩_θ
            let c_inv_new = 1.0 / t.c - d * a * b;
            if !(c_inv_new.is_finite()
                && c_inv_new.abs() > WINDOW_DENOMINATOR_MIN * (1.0 / t.c).abs().max(1.0))
            {
                return Err(FisherError::BrokenInvariant(format!(
                    "window coefficient denominator {c_inv_new} at depth {k}"
                )));
            }
            // Advance z before overwriting the triple: the recursion for
            // deeper levels uses the original values.
            let z_next = &z - &t.mu * (t.c * b);
            let zs_next = &zs - &t.nu * (t.c * a);
            t.mu -= &z * (d * a);
            t.nu -= &zs * (d * b);
            t.c = 1.0 / c_inv_new;
            z = z_next;
            zs = zs_next;
        }
        let head_den = 1.0 + w.dot(phi) / self.eps;
        if !(head_den.is_finite() && head_den.abs() > WINDOW_DENOMINATOR_MIN) {
            return Err(FisherError::BrokenInvariant(format!(
                "window head denominator {head_den}"
            )));
        }
        let scaled = phi / self.eps;
        self.triples.push_front(WindowTriple {
            c: 1.0 / head_den,
            mu: scaled.clone(),
            nu: scaled,
        });
        Ok(())
    }

    /// Applies the running-average inverse over the window:
    /// `occupancy · ((1/ε) g − Σ_k c_k μ_k ⟨ν_k, g⟩_θ)`.
    ///
    /// One metric application and `O(K)` vector operations. An empty window
    /// applies `(ε·Id)⁻¹` unscaled.
    pub fn apply<M: Manifold>(
        &self,
        manifold: &M,
        theta: &M::Point,
        g: &Tangent,
    ) -> Result<Tangent> {
        let mut out = self.apply_unscaled(manifold, theta, g)?;
        out *= self.len().max(1) as f64;
        Ok(out)
    }

    /// Applies the unnormalized window inverse without the occupancy
    /// scaling.
    pub fn apply_unscaled<M: Manifold>(
        &self,
        manifold: &M,
        theta: &M::Point,
        g: &Tangent,
    ) -> Result<Tangent> {
        self.check_dim(g.len())?;
        let w = manifold.metric_apply(theta, g);
        let mut out = g / self.eps;
        for t in &self.triples {
            out -= &t.mu * (t.c * t.nu.dot(&w));
        }
        Ok(out)
    }

    /// Moves the window across a step: `μ ← 𝒯 μ` and `ν ← 𝒯⁻* ν`, which
    /// preserves the `(1/ε)·Id` part of the representation exactly.
    ///
    /// # Errors
    ///
    /// Propagates [`GeometryError::InvalidInput`] when the maps lack a
    /// closed-form inverse-adjoint (non-isometric backends); use
    /// [`WindowInvFisher::window_transport`] for the materialized fallback.
    pub fn window_transport_with(&mut self, maps: &dyn TransportMaps) -> Result<()> {
        for t in &mut self.triples {
            t.mu = maps.forward(&t.mu)?;
            t.nu = maps.forward_inv_adjoint(&t.nu)?;
        }
        Ok(())
    }

    /// Moves the window from `from` to `to`.
    ///
    /// Isometric backends use the closed-form maps. Non-isometric backends
    /// fall back to materializing the forward transport once (`O(D³)` for a
    /// `D`-dimensional chart) and solving for the inverse-adjoint images of
    /// the `ν` vectors through the metric. The solve is a minimum-norm
    /// least-squares solve with the right-hand side routed through the
    /// tangent projector's transpose, so charts with gauge redundancy —
    /// where the transport annihilates the redundant directions and is
    /// therefore rank-deficient — still transport exactly on the subspace
    /// the state is ever applied to; see the inline derivation.
    pub fn window_transport<M: Manifold>(
        &mut self,
        manifold: &M,
        from: &M::Point,
        to: &M::Point,
    ) -> Result<()> {
        let maps = manifold.step_maps(from, to)?;
        self.window_transport_impl(manifold, from, to, maps.as_ref())
    }

    /// Like [`WindowInvFisher::window_transport`], but along a known step
    /// direction (`to = retract(from, v)`), avoiding the inverse
    /// retraction.
    pub fn window_transport_along<M: Manifold>(
        &mut self,
        manifold: &M,
        from: &M::Point,
        v: &Tangent,
        to: &M::Point,
    ) -> Result<()> {
        let maps = manifold.step_maps_along(from, v, to)?;
        self.window_transport_impl(manifold, from, to, maps.as_ref())
    }

    fn window_transport_impl<M: Manifold>(
        &mut self,
        manifold: &M,
        from: &M::Point,
        to: &M::Point,
        maps: &dyn TransportMaps,
    ) -> Result<()> {
        if maps.isometric() {
            return self.window_transport_with(maps);
        }
        // Materialized fallback: [𝒯⁻*] = G_new⁻¹ [𝒯]⁺ᵀ Π_oldᵀ G_old.
        //
        // The transported ν must reproduce ⟨ν_new, G_new g⟩ = ⟨ν_old,
        // G_old 𝒯⁻¹g⟩ for every tangent g at the new point. On charts with
        // gauge redundancy [𝒯] is rank-deficient (it annihilates the
        // redundant directions), so the system `[𝒯]ᵀ x = G_old ν` can be
        // inconsistent as stated: G_old ν need not lie in range([𝒯]ᵀ).
        // Composing the right-hand side with the transpose of the tangent
        // projector Π = project ∘ embed maps it to the representative of
        // the same linear functional inside range([𝒯]ᵀ) — Π and 𝒯 share
        // their null space, and ⟨Πᵀy, w⟩ = ⟨y, w⟩ for tangent w — after
        // which the minimum-norm least-squares solve is exact on the
        // reachable subspace. On fully parameterized charts Π acts as the
        // identity on stored states and the solve reduces to the plain
        // inverse-adjoint.
        let mut fwd = DMatrix::zeros(self.dim, self.dim);
        let mut pi = DMatrix::zeros(self.dim, self.dim);
        let mut e: Tangent = DVector::zeros(self.dim);
        for j in 0..self.dim {
            e[j] = 1.0;
            fwd.set_column(j, &maps.forward(&e)?);
            pi.set_column(j, &manifold.project(from, &manifold.embed_tangent(from, &e)));
            e[j] = 0.0;
        }
        let svd = fwd.transpose().svd(true, true);
        let cutoff = svd.singular_values.max() * TRANSPORT_PINV_CUTOFF;
        let pi_t = pi.transpose();
        for t in &mut self.triples {
            let rhs = &pi_t * manifold.metric_apply(from, &t.nu);
            let solved = svd.solve(&rhs, cutoff).map_err(|msg| {
                FisherError::BrokenInvariant(format!(
                    "forward transport cannot be pseudo-inverted: {msg}"
                ))
            })?;
            t.nu = manifold.metric_solve(to, &solved);
            t.mu = maps.forward(&t.mu)?;
        }
        Ok(())
    }

    /// Materializes the unnormalized inverse as a dense matrix
    /// (diagnostics and tests; `O(K)` metric applications).
    pub fn to_matrix<M: Manifold>(&self, manifold: &M, theta: &M::Point) -> DMatrix<f64> {
        let mut out = DMatrix::identity(self.dim, self.dim) / self.eps;
        for t in &self.triples {
            let gnu = manifold.metric_apply(theta, &t.nu);
            out.ger(-t.c, &t.mu, &gnu, 1.0);
        }
        out
    }

    /// Writes a versioned binary checkpoint.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(
            w,
            1,
            self.dim as u64,
            self.cap as u64,
            self.eps,
            self.triples.len() as u64,
        )?;
        w.write_all(&(self.triples.len() as u64).to_le_bytes())?;
        for t in &self.triples {
            w.write_all(&t.c.to_le_bytes())?;
            for v in t.mu.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in t.nu.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores a state previously written by [`WindowInvFisher::save`].
    ///
    /// # Errors
    ///
    /// [`FisherError::Format`] on magic, version, tag, or layout mismatch.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let header = read_header(r)?;
        if header.tag != 1 {
            return Err(FisherError::Format(format!(
                "expected window state (tag 1), found tag {}",
                header.tag
            )));
        }
        let mut state = Self::new(header.dim as usize, header.cap as usize, header.eps)?;
        let len = read_u64(r)? as usize;
        if len > state.cap {
            return Err(FisherError::Format(format!(
                "window length {len} exceeds capacity {}",
                state.cap
            )));
        }
        for _ in 0..len {
            let c = read_f64(r)?;
            let mut mu = DVector::zeros(state.dim);
            for v in mu.iter_mut() {
                *v = read_f64(r)?;
            }
            let mut nu = DVector::zeros(state.dim);
            for v in nu.iter_mut() {
                *v = read_f64(r)?;
            }
            state.triples.push_back(WindowTriple { c, mu, nu });
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

struct Header {
    tag: u8,
    dim: u64,
    cap: u64,
    eps: f64,
    count: u64,
}

fn write_header<W: Write>(
    w: &mut W,
    tag: u8,
    dim: u64,
    cap: u64,
    eps: f64,
    count: u64,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[tag, 0, 0, 0])?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&cap.to_le_bytes())?;
    w.write_all(&eps.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FisherError::Format("bad magic bytes".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(FisherError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut tag_pad = [0u8; 4];
    r.read_exact(&mut tag_pad)?;
    Ok(Header {
        tag: tag_pad[0],
        dim: read_u64(r)?,
        cap: read_u64(r)?,
        eps: read_f64(r)?,
        count: read_u64(r)?,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
