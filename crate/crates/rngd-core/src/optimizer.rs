//! Optimization drivers.
//!
//! Four run loops share one chassis:
//!
//! - [`run_rsgd`] — plain Riemannian stochastic gradient descent,
//!   `θ ← R_θ(−τ_s ĝ)`.
//! - [`run_if_rngd`] — inversion-free Riemannian natural-gradient descent.
//!   Each iteration, in order: transport the inverse-curvature state from
//!   the previous iterate, sample model scores and fold them in by
//!   rank-one updates, draw a stochastic gradient, precondition
//!   `v = −τ_s 𝐇⁻¹ĝ`, retract. The ordering is observable through the
//!   per-iteration event log when [`RunConfig::record_events`] is set.
//! - [`run_exact_ngd`] — the same loop with a caller-supplied closed-form
//!   natural-gradient map instead of the running state (reference method
//!   for Gaussian families, whose Fisher inverse is analytic).
//! - [`run_extrinsic_ifngd`] — the flat-space baseline for constrained
//!   problems: the curvature state lives in the fixed ambient coordinates
//!   (so it is never transported), raw ambient scores feed it, and the
//!   preconditioned ambient direction is projected onto the tangent space
//!   before retracting.
//!
//! Shared behavior: step sizes follow [`StepSchedule`]
//! (`τ_s = c₀/(c₁+s)^α`); a failed retraction (domain violation, rank
//! collapse) halves the step up to [`RunConfig::max_halvings`] times
//! before aborting; any non-finite gradient or direction aborts with the
//! offending iteration; eigenvalue clipping inside retractions is counted
//! in the trace. All randomness comes from one counter-based generator
//! seeded by `(seed, stream)`, so a config reruns bit-identically;
//! objective values in the trace are evaluated with a fresh generator
//! seeded by `eval_seed` at every record, giving common random numbers
//! across methods and record points.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::bw::{
    gauss_chart_pack, gauss_chart_unpack, gaussian_score_bw, gaussian_score_euclidean,
    natural_gradient_bw, natural_gradient_flat, BwGaussian, GaussEuclidean, GaussPoint,
};
use crate::fisher::{DenseInvFisher, FisherError, WindowInvFisher};
use crate::fixedrank::{FixedRank, FixedRankPoint};
use crate::linalg::{sym_eig, sym_part, SymMatrix};
use crate::manifold::{Euclidean, GeometryError, Manifold, Product, Tangent};
use crate::objectives::{
    bw_chart_gradient, flat_chart_gradient, FlowManifold, FlowTarget, ObjectiveError,
    ReducedRankModel, SylvesterFlow, VbEstimator, VbModel,
};

/// `log 2π`, for closed-form Gaussian objective values.
const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Errors raised by the optimization drivers.
#[derive(Debug, Error)]
pub enum OptimError {
    /// Invalid run configuration.
    #[error("invalid run configuration: {0}")]
    Config(String),
    /// Geometry failure outside the retraction-halving path.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// Curvature-state failure.
    #[error(transparent)]
    Fisher(#[from] FisherError),
    /// Objective evaluation failure.
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    /// A gradient, direction, or objective came back non-finite.
    #[error("non-finite {what} at iteration {iter}; run aborted")]
    NonFinite {
        /// Iteration at which the value appeared.
        iter: usize,
        /// Which quantity was non-finite.
        what: &'static str,
    },
    /// The retraction kept failing after the configured number of step
    /// halvings.
    #[error("retraction failed after {halvings} halvings at iteration {iter}")]
    RetractionStalled {
        /// Iteration at which the step stalled.
        iter: usize,
        /// Number of halvings attempted.
        halvings: u32,
    },
}

/// Result alias for driver operations.
pub type Result<T> = std::result::Result<T, OptimError>;

/// A stochastic optimization problem over a manifold.
///
/// `gradient` and `score` return tangent vectors in chart coordinates:
/// `gradient` is a stochastic Riemannian gradient of the minimized
/// objective, `score` is a Riemannian score draw (zero-mean at every
/// point) feeding the curvature state. `objective` is an evaluation-only
/// estimate used for traces; drivers call it with a dedicated generator
/// so it never perturbs the optimization stream.
pub trait Problem<M: Manifold> {
    /// The geometry this problem lives on.
    fn manifold(&self) -> &M;
    /// Objective estimate at a point (trace/reporting only).
    fn objective(&self, point: &M::Point, rng: &mut dyn RngCore) -> Result<f64>;
    /// One stochastic Riemannian gradient draw.
    fn gradient(&self, point: &M::Point, rng: &mut dyn RngCore) -> Result<Tangent>;
    /// One zero-mean score draw for the curvature state.
    fn score(&self, point: &M::Point, rng: &mut dyn RngCore) -> Result<Tangent>;
}

/// A problem that additionally exposes raw ambient-coordinate gradients
/// and scores, for the extrinsic baseline.
pub trait AmbientProblem<M: Manifold> {
    /// The geometry (used for projection and retraction only).
    fn manifold(&self) -> &M;
    /// Objective estimate at a point.
    fn objective(&self, point: &M::Point, rng: &mut dyn RngCore) -> Result<f64>;
    /// One stochastic gradient in ambient coordinates (unprojected).
    fn ambient_gradient(&self, point: &M::Point, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
    /// One zero-mean score in ambient coordinates (unprojected).
    fn ambient_score(&self, point: &M::Point, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
}

// ---------------------------------------------------------------------------
// Configuration and traces
// ---------------------------------------------------------------------------

/// Polynomially decaying step size `τ_s = c₀ / (c₁ + s)^α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    /// Numerator scale `c₀ > 0`.
    pub c0: f64,
    /// Offset `c₁ > 0` (tames early steps).
    pub c1: f64,
    /// Decay exponent `α ∈ (½, 1)`.
    pub alpha: f64,
}

impl StepSchedule {
    /// Validates and builds a schedule.
    ///
    /// # Errors
    ///
    /// [`OptimError::Config`] unless `c₀, c₁ > 0` and `α ∈ (½, 1)`.
    pub fn new(c0: f64, c1: f64, alpha: f64) -> Result<Self> {
        if !(c0 > 0.0 && c1 > 0.0) {
            return Err(OptimError::Config(format!(
                "step scale and offset must be positive, got c0={c0}, c1={c1}"
            )));
        }
        if !(alpha > 0.5 && alpha < 1.0) {
            return Err(OptimError::Config(format!(
                "decay exponent must lie in (1/2, 1), got {alpha}"
            )));
        }
        Ok(Self { c0, c1, alpha })
    }

    /// `τ_s`; strictly decreasing and positive in `s`.
    pub fn step(&self, s: usize) -> f64 {
        self.c0 / (self.c1 + s as f64).powf(self.alpha)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            c0: 1.0,
            c1: 100.0,
            alpha: 0.75,
        }
    }
}

/// Shape of the inverse-curvature state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureSpec {
    /// No state (plain gradient methods).
    None,
    /// Dense block-diagonal inverse, one block per manifold factor.
    Dense,
    /// Sliding-window inverse over the most recent `cap` scores.
    Window {
        /// Window capacity.
        cap: usize,
    },
}

/// Everything a driver needs besides the problem and the start point.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Number of optimization steps.
    pub iters: usize,
    /// Step-size schedule.
    pub schedule: StepSchedule,
    /// Curvature ridge: the state starts at `ε·Id`.
    pub eps: f64,
    /// Inverse-curvature state shape.
    pub curvature: CurvatureSpec,
    /// Scores folded into the state per iteration.
    pub scores_per_iter: usize,
    /// Base RNG seed.
    pub seed: u64,
    /// RNG stream (replicate index); distinct streams are independent.
    pub stream: u64,
    /// Trace cadence: record every `record_every` iterations (0 = final
    /// row only). The final state is always recorded.
    pub record_every: usize,
    /// Seed of the dedicated objective-evaluation generator (common
    /// random numbers across record points and methods).
    pub eval_seed: u64,
    /// Step halvings allowed before a failing retraction aborts the run.
    pub max_halvings: u32,
    /// Record per-iteration transport/score/step events (diagnostics).
    pub record_events: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            schedule: StepSchedule::default(),
            eps: 1.0,
            curvature: CurvatureSpec::Dense,
            scores_per_iter: 1,
            seed: 0,
            stream: 0,
            record_every: 100,
            eval_seed: 0x5EED,
            max_halvings: 30,
            record_events: false,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(OptimError::Config(format!(
                "curvature ridge must be positive, got {}",
                self.eps
            )));
        }
        StepSchedule::new(self.schedule.c0, self.schedule.c1, self.schedule.alpha)?;
        Ok(())
    }
}

/// Loop phases logged when event recording is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    /// Curvature state carried from the previous iterate.
    StateTransport,
    /// One score folded into the state.
    ScoreUpdate,
    /// Parameter update (retraction) taken.
    Step,
}

/// One trace row.
#[derive(Debug, Clone)]
pub struct IterRecord {
    /// Iteration index (0 = initial point).
    pub iter: usize,
    /// Objective estimate under the evaluation generator.
    pub objective: f64,
    /// Metric norm of the stochastic gradient at this iterate.
    pub grad_norm: f64,
    /// Wall time since the run started, in milliseconds.
    pub wall_ms: f64,
    /// Distance to a reference point, when one was given.
    pub ref_dist: Option<f64>,
}

/// Full run record.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    /// Rows at the configured cadence plus the final state.
    pub records: Vec<IterRecord>,
    /// `(iteration, phase)` log; empty unless events were requested.
    pub events: Vec<(usize, StepEvent)>,
    /// Eigenvalues clipped by retractions across the run.
    pub clip_events: u64,
    /// Step halvings taken across the run.
    pub halving_events: u64,
}

/// Final iterate plus its trace.
#[derive(Debug, Clone)]
pub struct RunOutcome<P> {
    /// Last accepted point.
    pub point: P,
    /// Per-run records.
    pub trace: RunTrace,
}

// ---------------------------------------------------------------------------
// Inverse-curvature state dispatch
// ---------------------------------------------------------------------------

/// Either curvature-state layout behind one interface.
#[derive(Debug, Clone)]
pub enum InvCurvature {
    /// Dense block-diagonal Sherman–Morrison state.
    Dense(DenseInvFisher),
    /// Sliding-window state.
    Window(WindowInvFisher),
}

impl InvCurvature {
    /// Builds the state requested by `spec` (or `None` for plain runs).
    pub fn for_spec<M: Manifold>(
        manifold: &M,
        spec: CurvatureSpec,
        eps: f64,
    ) -> Result<Option<Self>> {
        Ok(match spec {
            CurvatureSpec::None => None,
            CurvatureSpec::Dense => Some(InvCurvature::Dense(DenseInvFisher::for_manifold(
                manifold, eps,
            )?)),
            CurvatureSpec::Window { cap } => Some(InvCurvature::Window(WindowInvFisher::new(
                manifold.dim(),
                cap,
                eps,
            )?)),
        })
    }

    /// Folds one score into the state.
    pub fn update<M: Manifold>(
        &mut self,
        manifold: &M,
        point: &M::Point,
        score: &Tangent,
    ) -> Result<()> {
        match self {
            InvCurvature::Dense(state) => state.sm_update(manifold, point, score)?,
            InvCurvature::Window(state) => state.window_update(manifold, point, score)?,
        }
        Ok(())
    }

    /// Applies the scaled inverse to a tangent vector.
    pub fn apply<M: Manifold>(
        &self,
        manifold: &M,
        point: &M::Point,
        g: &Tangent,
    ) -> Result<Tangent> {
        Ok(match self {
            InvCurvature::Dense(state) => state.apply(g)?,
            InvCurvature::Window(state) => state.apply(manifold, point, g)?,
        })
    }

    /// Carries the state along an accepted step `to = R_from(v)`.
    pub fn transport_along<M: Manifold>(
        &mut self,
        manifold: &M,
        from: &M::Point,
        v: &Tangent,
        to: &M::Point,
    ) -> Result<()> {
        match self {
            InvCurvature::Dense(state) => {
                let maps = manifold.step_maps_along(from, v, to)?;
                state.transport_state_with(maps.as_ref())?;
            }
            InvCurvature::Window(state) => {
                state.window_transport_along(manifold, from, v, to)?;
            }
        }
        Ok(())
    }

    /// Scores currently represented by the state.
    pub fn count(&self) -> usize {
        match self {
            InvCurvature::Dense(state) => state.count() as usize,
            InvCurvature::Window(state) => state.len(),
        }
    }
}

// ---------------------------------------------------------------------------
// Core loop
// ---------------------------------------------------------------------------

enum Mode<'a, M: Manifold> {
    Plain,
    State(InvCurvature),
    Exact(&'a dyn Fn(&M::Point, &Tangent) -> Result<Tangent>),
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct Recorder<'a, M: Manifold> {
    cfg: &'a RunConfig,
    reference: Option<&'a M::Point>,
    started: Instant,
    trace: RunTrace,
}

impl<'a, M: Manifold> Recorder<'a, M> {
    fn new(cfg: &'a RunConfig, reference: Option<&'a M::Point>) -> Self {
        Self {
            cfg,
            reference,
            started: Instant::now(),
            trace: RunTrace::default(),
        }
    }

    fn due(&self, s: usize) -> bool {
        self.cfg.record_every != 0 && s % self.cfg.record_every == 0
    }

    fn event(&mut self, s: usize, e: StepEvent) {
        if self.cfg.record_events {
            self.trace.events.push((s, e));
        }
    }

    fn row<P: Problem<M> + ?Sized>(
        &mut self,
        problem: &P,
        manifold: &M,
        s: usize,
        point: &M::Point,
        grad_norm: f64,
    ) -> Result<()> {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(self.cfg.eval_seed);
        let objective = problem.objective(point, &mut eval_rng)?;
        self.push_row(manifold, s, point, grad_norm, objective);
        Ok(())
    }

    fn push_row(
        &mut self,
        manifold: &M,
        s: usize,
        point: &M::Point,
        grad_norm: f64,
        objective: f64,
    ) {
        self.trace.records.push(IterRecord {
            iter: s,
            objective,
            grad_norm,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            ref_dist: self.reference.map(|r| manifold.distance(point, r)),
        });
    }
}

/// Retracts with step-halving on recoverable geometry failures; returns
/// the accepted point, the direction actually used, and the clip count.
///
/// `validate` runs on each candidate point before acceptance; a
/// recoverable geometry error there also halves the step. Drivers that
/// must transport curvature state across the step use it to reject
/// candidates whose step maps cannot be built (e.g. a covariance so close
/// to the boundary of the positive cone that the transport is
/// numerically meaningless), so every accepted step is also a
/// transportable one.
fn retract_with_halving<M: Manifold>(
    manifold: &M,
    point: &M::Point,
    v: Tangent,
    s: usize,
    max_halvings: u32,
    trace: &mut RunTrace,
    validate: impl Fn(&M::Point, &Tangent) -> std::result::Result<(), GeometryError>,
) -> Result<(M::Point, Tangent)> {
    let mut v_try = v;
    for attempt in 0..=max_halvings {
        let candidate = manifold
            .retract_diag(point, &v_try)
            .and_then(|(new_point, diag)| {
                validate(&new_point, &v_try)?;
                Ok((new_point, diag))
            });
        match candidate {
            Ok((new_point, diag)) => {
                trace.clip_events += diag.clipped_eigenvalues as u64;
                trace.halving_events += attempt as u64;
                return Ok((new_point, v_try));
            }
            Err(e @ (GeometryError::DimensionMismatch { .. } | GeometryError::InvalidInput(_))) => {
                return Err(OptimError::Geometry(e));
            }
            Err(_) => v_try *= 0.5,
        }
    }
    Err(OptimError::RetractionStalled {
        iter: s,
        halvings: max_halvings,
    })
}

fn drive<M: Manifold, P: Problem<M> + ?Sized>(
    problem: &P,
    start: M::Point,
    cfg: &RunConfig,
    reference: Option<&M::Point>,
    mut mode: Mode<'_, M>,
) -> Result<RunOutcome<M::Point>> {
    cfg.validate()?;
    let manifold = problem.manifold();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let mut recorder = Recorder::<M>::new(cfg, reference);
    let mut point = start;
    // The step accepted at the previous iteration, for state transport.
    let mut pending: Option<(M::Point, Tangent)> = None;
    // State-carrying runs must transport the curvature state along every
    // accepted step, so candidate points whose step maps cannot be built
    // are rejected during halving rather than poisoning the next
    // iteration's transport.
    let needs_transport = matches!(mode, Mode::State(_));

    for s in 0..cfg.iters {
        if let Mode::State(state) = &mut mode {
            if let Some((prev, v_used)) = pending.take() {
                state.transport_along(manifold, &prev, &v_used, &point)?;
                recorder.event(s, StepEvent::StateTransport);
            }
            for _ in 0..cfg.scores_per_iter {
                let phi = problem.score(&point, &mut rng)?;
                if !all_finite(&phi) {
                    return Err(OptimError::NonFinite {
                        iter: s,
                        what: "score",
                    });
                }
                state.update(manifold, &point, &phi)?;
                recorder.event(s, StepEvent::ScoreUpdate);
            }
        }

        let g = problem.gradient(&point, &mut rng)?;
        if !all_finite(&g) {
            return Err(OptimError::NonFinite {
                iter: s,
                what: "gradient",
            });
        }
        let grad_norm = manifold.inner(&point, &g, &g).sqrt();
        if recorder.due(s) {
            recorder.row(problem, manifold, s, &point, grad_norm)?;
        }

        let mut v = match &mode {
            Mode::Plain => g,
            Mode::State(state) => state.apply(manifold, &point, &g)?,
            Mode::Exact(precondition) => precondition(&point, &g)?,
        };
        v *= -cfg.schedule.step(s);
        if !all_finite(&v) {
            return Err(OptimError::NonFinite {
                iter: s,
                what: "step direction",
            });
        }

        let (new_point, v_used) = retract_with_halving(
            manifold,
            &point,
            v,
            s,
            cfg.max_halvings,
            &mut recorder.trace,
            |candidate, used| {
                if needs_transport {
                    manifold.step_maps_along(&point, used, candidate).map(|_| ())
                } else {
                    Ok(())
                }
            },
        )?;
        recorder.event(s, StepEvent::Step);
        pending = Some((point, v_used));
        point = new_point;
    }

    // Final row: one extra gradient draw for the norm column.
    let g = problem.gradient(&point, &mut rng)?;
    let grad_norm = manifold.inner(&point, &g, &g).sqrt();
    recorder.row(problem, manifold, cfg.iters, &point, grad_norm)?;
    Ok(RunOutcome {
        point,
        trace: recorder.trace,
    })
}

/// Plain Riemannian SGD: `θ ← R_θ(−τ_s ĝ)`. Ignores the curvature spec.
pub fn run_rsgd<M: Manifold, P: Problem<M>>(
    problem: &P,
    start: M::Point,
    cfg: &RunConfig,
    reference: Option<&M::Point>,
) -> Result<RunOutcome<M::Point>> {
    drive(problem, start, cfg, reference, Mode::Plain)
}

/// Inversion-free Riemannian natural-gradient descent (see module docs
/// for the per-iteration order).
///
/// # Errors
///
/// [`OptimError::Config`] when the config requests no curvature state or
/// zero scores per iteration.
pub fn run_if_rngd<M: Manifold, P: Problem<M>>(
    problem: &P,
    start: M::Point,
    cfg: &RunConfig,
    reference: Option<&M::Point>,
) -> Result<RunOutcome<M::Point>> {
    let state = InvCurvature::for_spec(problem.manifold(), cfg.curvature, cfg.eps)?
        .ok_or_else(|| OptimError::Config("this driver needs a curvature state".into()))?;
    if cfg.scores_per_iter == 0 {
        return Err(OptimError::Config(
            "need at least one score per iteration".into(),
        ));
    }
    drive(problem, start, cfg, reference, Mode::State(state))
}

/// Natural-gradient descent with a caller-supplied exact preconditioner
/// mapping `(θ, ĝ) ↦ I_F(θ)⁻¹ĝ`.
pub fn run_exact_ngd<M: Manifold, P: Problem<M>>(
    problem: &P,
    start: M::Point,
    cfg: &RunConfig,
    reference: Option<&M::Point>,
    precondition: &dyn Fn(&M::Point, &Tangent) -> Result<Tangent>,
) -> Result<RunOutcome<M::Point>> {
    drive(problem, start, cfg, reference, Mode::Exact(precondition))
}

/// Extrinsic inversion-free baseline: ambient-coordinate curvature state
/// (never transported), raw ambient scores, preconditioned ambient
/// direction projected onto the tangent space, then retracted.
pub fn run_extrinsic_ifngd<M: Manifold, P: AmbientProblem<M>>(
    problem: &P,
    start: M::Point,
    cfg: &RunConfig,
    reference: Option<&M::Point>,
) -> Result<RunOutcome<M::Point>> {
    cfg.validate()?;
    let manifold = problem.manifold();
    let ambient = Euclidean::new(manifold.ambient_dim());
    let origin: DVector<f64> = DVector::zeros(manifold.ambient_dim());
    let mut state = InvCurvature::for_spec(&ambient, cfg.curvature, cfg.eps)?
        .ok_or_else(|| OptimError::Config("the extrinsic baseline needs a curvature state".into()))?;
    if cfg.scores_per_iter == 0 {
        return Err(OptimError::Config(
            "need at least one score per iteration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream);
    let mut recorder = Recorder::<M>::new(cfg, reference);
    let mut point = start;

    let eval = |recorder: &mut Recorder<M>,
                problem: &P,
                s: usize,
                point: &M::Point,
                grad_norm: f64|
     -> Result<()> {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(recorder.cfg.eval_seed);
        let objective = problem.objective(point, &mut eval_rng)?;
        recorder.push_row(problem.manifold(), s, point, grad_norm, objective);
        Ok(())
    };

    for s in 0..cfg.iters {
        for _ in 0..cfg.scores_per_iter {
            let phi = problem.ambient_score(&point, &mut rng)?;
            if !all_finite(&phi) {
                return Err(OptimError::NonFinite {
                    iter: s,
                    what: "score",
                });
            }
            state.update(&ambient, &origin, &phi)?;
            recorder.event(s, StepEvent::ScoreUpdate);
        }
        let g_ambient = problem.ambient_gradient(&point, &mut rng)?;
        if !all_finite(&g_ambient) {
            return Err(OptimError::NonFinite {
                iter: s,
                what: "gradient",
            });
        }
        let g_chart = manifold.project(&point, &g_ambient);
        let grad_norm = manifold.inner(&point, &g_chart, &g_chart).sqrt();
        if recorder.due(s) {
            eval(&mut recorder, problem, s, &point, grad_norm)?;
        }
        let preconditioned = state.apply(&ambient, &origin, &g_ambient)?;
        let mut v = manifold.project(&point, &preconditioned);
        v *= -cfg.schedule.step(s);
        if !all_finite(&v) {
            return Err(OptimError::NonFinite {
                iter: s,
                what: "step direction",
            });
        }
        let (new_point, _) = retract_with_halving(
            manifold,
            &point,
            v,
            s,
            cfg.max_halvings,
            &mut recorder.trace,
            |_, _| Ok(()),
        )?;
        recorder.event(s, StepEvent::Step);
        point = new_point;
    }

    let g_ambient = problem.ambient_gradient(&point, &mut rng)?;
    let g_chart = manifold.project(&point, &g_ambient);
    let grad_norm = manifold.inner(&point, &g_chart, &g_chart).sqrt();
    eval(&mut recorder, problem, cfg.iters, &point, grad_norm)?;
    Ok(RunOutcome {
        point,
        trace: recorder.trace,
    })
}

// ---------------------------------------------------------------------------
// Gaussian variational adapters (flat and transport-metric charts)
// ---------------------------------------------------------------------------

/// Which Gaussian chart a variational run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaussChart {
    /// Identity-metric `(μ, Σ)` chart.
    Flat,
    /// Transport-metric chart (Lyapunov-parametrized covariance steps).
    Curved,
}

/// Which update rule a variational run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbMethod {
    /// Plain (Riemannian) gradient descent.
    Gd,
    /// Closed-form natural gradient.
    Ngd,
    /// Inversion-free natural gradient with a running curvature state.
    NgdApprox,
}

/// Gaussian variational inference for logistic regression as a [`Problem`]
/// over either Gaussian chart.
#[derive(Debug, Clone)]
pub struct VbProblem<'a> {
    model: &'a VbModel,
    estimator: VbEstimator,
    batch: usize,
    eval_batch: usize,
    flat: GaussEuclidean,
    curved: BwGaussian,
}

impl<'a> VbProblem<'a> {
    /// Wraps a model with its gradient estimator and batch sizes.
    pub fn new(
        model: &'a VbModel,
        estimator: VbEstimator,
        batch: usize,
        eval_batch: usize,
    ) -> Self {
        let d = model.dim();
        Self {
            model,
            estimator,
            batch,
            eval_batch,
            flat: GaussEuclidean::new(d),
            curved: BwGaussian::new(d),
        }
    }

    fn flat_gradients(
        &self,
        q: &GaussPoint,
        rng: &mut dyn RngCore,
    ) -> Result<crate::objectives::GaussGrad> {
        Ok(self.model.gradient(q, self.estimator, self.batch, rng)?)
    }
}

impl Problem<GaussEuclidean> for VbProblem<'_> {
    fn manifold(&self) -> &GaussEuclidean {
        &self.flat
    }

    fn objective(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<f64> {
        Ok(self.model.nelbo(q, self.eval_batch, rng)?)
    }

    fn gradient(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        Ok(flat_chart_gradient(&self.flat_gradients(q, rng)?))
    }

    fn score(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let y = q.sample(rng)?;
        let (s_mean, s_cov) = gaussian_score_euclidean(q, &y)?;
        Ok(gauss_chart_pack(&s_mean, s_cov.matrix()))
    }
}

impl Problem<BwGaussian> for VbProblem<'_> {
    fn manifold(&self) -> &BwGaussian {
        &self.curved
    }

    fn objective(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<f64> {
        Ok(self.model.nelbo(q, self.eval_batch, rng)?)
    }

    fn gradient(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        Ok(bw_chart_gradient(&self.flat_gradients(q, rng)?))
    }

    fn score(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let y = q.sample(rng)?;
        let (s_mean, s_cov) = gaussian_score_bw(q, &y)?;
        Ok(gauss_chart_pack(&s_mean, s_cov.matrix()))
    }
}

/// Exact natural-gradient map for the flat chart: the chart gradient is
/// the differential, so apply the closed-form inverse Fisher directly.
pub fn flat_exact_preconditioner(d: usize) -> impl Fn(&GaussPoint, &Tangent) -> Result<Tangent> {
    move |q: &GaussPoint, g: &Tangent| {
        let (g_mean, g_cov) = gauss_chart_unpack(d, g);
        let g_cov = sym_part(&g_cov).map_err(GeometryError::from)?;
        let (n_mean, n_cov) = natural_gradient_flat(q, &g_mean, &g_cov);
        Ok(gauss_chart_pack(&n_mean, n_cov.matrix()))
    }
}

/// Exact natural-gradient map for the curved chart: the chart gradient
/// carries twice the covariance differential, so halve, precondition with
/// the closed form, and repack.
pub fn curved_exact_preconditioner(d: usize) -> impl Fn(&GaussPoint, &Tangent) -> Result<Tangent> {
    move |q: &GaussPoint, g: &Tangent| {
        let (g_mean, doubled) = gauss_chart_unpack(d, g);
        let g_cov = sym_part(&(doubled * 0.5)).map_err(GeometryError::from)?;
        let (n_mean, n_cov) = natural_gradient_bw(q, &g_mean, &g_cov)?;
        Ok(gauss_chart_pack(&n_mean, n_cov.matrix()))
    }
}

/// Runs one cell of the chart × method design for Gaussian variational
/// inference and returns the final variational parameters with the trace.
#[allow(clippy::too_many_arguments)]
pub fn run_vb(
    model: &VbModel,
    chart: GaussChart,
    method: VbMethod,
    estimator: VbEstimator,
    batch: usize,
    eval_batch: usize,
    start: GaussPoint,
    cfg: &RunConfig,
    reference: Option<&GaussPoint>,
) -> Result<RunOutcome<GaussPoint>> {
    let problem = VbProblem::new(model, estimator, batch, eval_batch);
    let d = model.dim();
    match (chart, method) {
        (GaussChart::Flat, VbMethod::Gd) => {
            run_rsgd::<GaussEuclidean, _>(&problem, start, cfg, reference)
        }
        (GaussChart::Flat, VbMethod::Ngd) => {
            let pre = flat_exact_preconditioner(d);
            run_exact_ngd::<GaussEuclidean, _>(&problem, start, cfg, reference, &pre)
        }
        (GaussChart::Flat, VbMethod::NgdApprox) => {
            run_if_rngd::<GaussEuclidean, _>(&problem, start, cfg, reference)
        }
        (GaussChart::Curved, VbMethod::Gd) => {
            run_rsgd::<BwGaussian, _>(&problem, start, cfg, reference)
        }
        (GaussChart::Curved, VbMethod::Ngd) => {
            let pre = curved_exact_preconditioner(d);
            run_exact_ngd::<BwGaussian, _>(&problem, start, cfg, reference, &pre)
        }
        (GaussChart::Curved, VbMethod::NgdApprox) => {
            run_if_rngd::<BwGaussian, _>(&problem, start, cfg, reference)
        }
    }
}

// ---------------------------------------------------------------------------
// Reduced-rank multinomial adapter
// ---------------------------------------------------------------------------

/// Geometry of the reduced-rank multinomial problem: a fixed-rank
/// coefficient factor and Euclidean intercepts.
pub type ReducedRankManifold = Product<FixedRank, Euclidean>;

/// Point of the reduced-rank problem.
pub type ReducedRankPoint = (FixedRankPoint, DVector<f64>);

/// Reduced-rank multinomial regression as a manifold problem. The
/// objective reported in traces is the full-data mean negative
/// log-likelihood (deterministic); gradients subsample `batch` rows with
/// replacement; scores resample labels from the model.
#[derive(Debug, Clone)]
pub struct ReducedRankProblem<'a> {
    model: &'a ReducedRankModel,
    manifold: ReducedRankManifold,
    batch: usize,
}

impl<'a> ReducedRankProblem<'a> {
    /// Builds the problem at the given coefficient rank.
    pub fn new(model: &'a ReducedRankModel, rank: usize, batch: usize) -> Self {
        let manifold = Product::new(
            FixedRank::new(model.data().dim(), model.coef_classes(), rank),
            Euclidean::new(model.coef_classes()),
        );
        Self {
            model,
            manifold,
            batch,
        }
    }

    /// Underlying model.
    pub fn model(&self) -> &ReducedRankModel {
        self.model
    }

    fn pack(&self, g_b: &DMatrix<f64>, g_alpha: &DVector<f64>) -> DVector<f64> {
        let nb = g_b.len();
        let mut out = DVector::zeros(nb + g_alpha.len());
        out.rows_mut(0, nb).copy_from_slice(g_b.as_slice());
        out.rows_mut(nb, g_alpha.len()).copy_from(g_alpha);
        out
    }

    fn minibatch(&self, rng: &mut dyn RngCore) -> Vec<usize> {
        (0..self.batch)
            .map(|_| rng.gen_range(0..self.model.data().n()))
            .collect()
    }
}

impl Problem<ReducedRankManifold> for ReducedRankProblem<'_> {
    fn manifold(&self) -> &ReducedRankManifold {
        &self.manifold
    }

    fn objective(&self, point: &ReducedRankPoint, _rng: &mut dyn RngCore) -> Result<f64> {
        Ok(self.model.mean_nll(&point.0.to_dense(), &point.1))
    }

    fn gradient(&self, point: &ReducedRankPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let ambient = self.ambient_gradient(point, rng)?;
        Ok(self.manifold.project(point, &ambient))
    }

    fn score(&self, point: &ReducedRankPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let ambient = self.ambient_score(point, rng)?;
        Ok(self.manifold.project(point, &ambient))
    }
}

impl AmbientProblem<ReducedRankManifold> for ReducedRankProblem<'_> {
    fn manifold(&self) -> &ReducedRankManifold {
        &self.manifold
    }

    fn objective(&self, point: &ReducedRankPoint, rng: &mut dyn RngCore) -> Result<f64> {
        Problem::objective(self, point, rng)
    }

    fn ambient_gradient(
        &self,
        point: &ReducedRankPoint,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        let idx = self.minibatch(rng);
        let (g_b, g_alpha) = self
            .model
            .mean_nll_grad(&point.0.to_dense(), &point.1, &idx);
        Ok(self.pack(&g_b, &g_alpha))
    }

    fn ambient_score(
        &self,
        point: &ReducedRankPoint,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        let (s_b, s_alpha) = self
            .model
            .sampled_model_score(&point.0.to_dense(), &point.1, rng);
        Ok(self.pack(&s_b, &s_alpha))
    }
}

// ---------------------------------------------------------------------------
// Flow adapter
// ---------------------------------------------------------------------------

/// Variational fitting of the orthogonal-layer flow to an unnormalized
/// target, as a manifold problem.
#[derive(Debug)]
pub struct FlowVbProblem<'a, T: FlowTarget + ?Sized> {
    flow: &'a SylvesterFlow,
    target: &'a T,
    manifold: FlowManifold,
    batch: usize,
    eval_batch: usize,
}

impl<'a, T: FlowTarget + ?Sized> FlowVbProblem<'a, T> {
    /// Wraps a flow/target pair.
    pub fn new(flow: &'a SylvesterFlow, target: &'a T, batch: usize, eval_batch: usize) -> Self {
        assert_eq!(
            flow.dim_latent(),
            target.dim(),
            "flow and target dimensions must match"
        );
        Self {
            flow,
            target,
            manifold: flow.manifold(),
            batch,
            eval_batch,
        }
    }
}

impl<T: FlowTarget + ?Sized> Problem<FlowManifold> for FlowVbProblem<'_, T> {
    fn manifold(&self) -> &FlowManifold {
        &self.manifold
    }

    fn objective(
        &self,
        point: &<FlowManifold as Manifold>::Point,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..self.eval_batch {
            let s = self.flow.sample(point, rng);
            total += self.flow.log_q(&s) - self.target.log_density(&s.y);
        }
        Ok(total / self.eval_batch.max(1) as f64)
    }

    fn gradient(
        &self,
        point: &<FlowManifold as Manifold>::Point,
        rng: &mut dyn RngCore,
    ) -> Result<Tangent> {
        let mut acc = DVector::zeros(self.manifold.ambient_dim());
        for _ in 0..self.batch {
            let s = self.flow.sample(point, rng);
            let (_, grads) = self.flow.nelbo_sample_grad(point, &s, self.target);
            acc += self.flow.pack_ambient(&grads);
        }
        acc /= self.batch.max(1) as f64;
        Ok(self.manifold.project(point, &acc))
    }

    fn score(
        &self,
        point: &<FlowManifold as Manifold>::Point,
        rng: &mut dyn RngCore,
    ) -> Result<Tangent> {
        let s = self.flow.sample(point, rng);
        let grads = self.flow.score_ambient(point, &s);
        Ok(self.manifold.project(point, &self.flow.pack_ambient(&grads)))
    }
}

// ---------------------------------------------------------------------------
// Reference problems
// ---------------------------------------------------------------------------

/// Strongly convex Euclidean test problem with an exact-score sampling
/// family: parameters locate a unit-covariance Gaussian, the energy is a
/// quadratic around `target`, so the minimizer of the expected objective
/// is `target` itself, the score draw is exactly `ε ~ N(0, I)`, and the
/// Fisher operator is the identity.
#[derive(Debug, Clone)]
pub struct QuadraticMeanProblem {
    /// Minimizer of the expected objective.
    pub target: DVector<f64>,
    /// SPD energy curvature.
    pub precision: SymMatrix,
    manifold: Euclidean,
    batch: usize,
}

impl QuadraticMeanProblem {
    /// Builds the problem.
    pub fn new(target: DVector<f64>, precision: SymMatrix, batch: usize) -> Self {
        let manifold = Euclidean::new(target.len());
        Self {
            target,
            precision,
            manifold,
            batch,
        }
    }
}

impl Problem<Euclidean> for QuadraticMeanProblem {
    fn manifold(&self) -> &Euclidean {
        &self.manifold
    }

    /// Closed form: `½(δᵀQδ + tr Q)` with `δ = θ − target`.
    fn objective(&self, theta: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<f64> {
        let delta = theta - &self.target;
        Ok(0.5 * (delta.dot(&(self.precision.matrix() * &delta)) + self.precision.matrix().trace()))
    }

    fn gradient(&self, theta: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Tangent> {
        let d = theta.len();
        let mut mean_y = DVector::zeros(d);
        for _ in 0..self.batch {
            let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            mean_y += theta + eps;
        }
        mean_y /= self.batch as f64;
        Ok(self.precision.matrix() * (mean_y - &self.target))
    }

    fn score(&self, theta: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Tangent> {
        Ok(DVector::from_fn(theta.len(), |_, _| {
            StandardNormal.sample(rng)
        }))
    }
}

/// Gaussian variational inference against an exactly Gaussian target
/// (`energy = ½(y−c)ᵀQ(y−c)`), over either Gaussian chart. The optimal
/// variational parameters are `(c, Q⁻¹)` and the divergence from them is
/// available in closed form, making this the convergence oracle.
#[derive(Debug, Clone)]
pub struct GaussTargetVb {
    /// Energy center (optimal mean).
    pub center: DVector<f64>,
    /// Energy curvature (optimal precision).
    pub precision: SymMatrix,
    batch: usize,
    exact: bool,
    flat: GaussEuclidean,
    curved: BwGaussian,
}

impl GaussTargetVb {
    /// Stochastic-gradient version: energy gradients averaged over `batch`
    /// Monte Carlo draws from the current variational Gaussian.
    pub fn new(center: DVector<f64>, precision: SymMatrix, batch: usize) -> Self {
        let d = center.len();
        Self {
            center,
            precision,
            batch,
            exact: false,
            flat: GaussEuclidean::new(d),
            curved: BwGaussian::new(d),
        }
    }

    /// Deterministic version: gradients are the exact expectations
    /// (`Q(μ−c)`, `½Q − ½Σ⁻¹`).
    pub fn exact(center: DVector<f64>, precision: SymMatrix) -> Self {
        let mut p = Self::new(center, precision, 1);
        p.exact = true;
        p
    }

    /// Variational objective up to the target's constant: `½(tr(QΣ) +
    /// δᵀQδ) − ½ log det Σ − (d/2) log 2πe`.
    pub fn objective_value(&self, q: &GaussPoint) -> Result<f64> {
        let d = q.dim() as f64;
        let delta = &q.mean - &self.center;
        let eig = sym_eig(&q.cov).map_err(GeometryError::from)?;
        let log_det: f64 = eig.values.iter().map(|&v| v.ln()).sum();
        Ok(0.5
            * ((self.precision.matrix() * q.cov.matrix()).trace()
                + delta.dot(&(self.precision.matrix() * &delta)))
            - 0.5 * log_det
            - 0.5 * d * (LN_2PI + 1.0))
    }

    /// Flat-chart gradients `(g_μ, g_Σ)` of the objective.
    fn flat_gradients(
        &self,
        q: &GaussPoint,
        rng: &mut dyn RngCore,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let eig = sym_eig(&q.cov).map_err(GeometryError::from)?;
        let inv = eig.apply_fn(f64::recip);
        let g_mean = if self.exact {
            self.precision.matrix() * (&q.mean - &self.center)
        } else {
            let ys = q.sample_n(self.batch, rng)?;
            let mut acc = DVector::zeros(q.dim());
            for b in 0..self.batch {
                acc += self.precision.matrix() * (ys.column(b) - &self.center);
            }
            acc / self.batch as f64
        };
        let g_cov = 0.5 * (self.precision.matrix() - inv.matrix());
        Ok((g_mean, g_cov))
    }
}

impl Problem<GaussEuclidean> for GaussTargetVb {
    fn manifold(&self) -> &GaussEuclidean {
        &self.flat
    }

    fn objective(&self, q: &GaussPoint, _rng: &mut dyn RngCore) -> Result<f64> {
        self.objective_value(q)
    }

    fn gradient(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let (g_mean, g_cov) = self.flat_gradients(q, rng)?;
        Ok(gauss_chart_pack(&g_mean, &g_cov))
    }

    fn score(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let y = q.sample(rng)?;
        let (s_mean, s_cov) = gaussian_score_euclidean(q, &y)?;
        Ok(gauss_chart_pack(&s_mean, s_cov.matrix()))
    }
}

impl Problem<BwGaussian> for GaussTargetVb {
    fn manifold(&self) -> &BwGaussian {
        &self.curved
    }

    fn objective(&self, q: &GaussPoint, _rng: &mut dyn RngCore) -> Result<f64> {
        self.objective_value(q)
    }

    fn gradient(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let (g_mean, g_cov) = self.flat_gradients(q, rng)?;
        Ok(gauss_chart_pack(&g_mean, &(2.0 * g_cov)))
    }

    fn score(&self, q: &GaussPoint, rng: &mut dyn RngCore) -> Result<Tangent> {
        let y = q.sample(rng)?;
        let (s_mean, s_cov) = gaussian_score_bw(q, &y)?;
        Ok(gauss_chart_pack(&s_mean, s_cov.matrix()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bw::{gaussian_kl, COVARIANCE_EIG_FLOOR};
    use crate::objectives::{LogisticData, MultinomialData};
    use crate::stiefel::{st_drift, st_project, st_reorthonormalize, Stiefel};
    use rand::rngs::StdRng;

    fn randn_vec(d: usize, rng: &mut StdRng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
    }

    fn randn_mat(r: usize, c: usize, rng: &mut StdRng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn spd(d: usize, rng: &mut StdRng) -> SymMatrix {
        let b = randn_mat(d, d, rng);
        SymMatrix::new(&b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5).unwrap()
    }

    #[test]
    fn schedule_matches_closed_form_and_decreases() {
        let sched = StepSchedule::default();
        assert!((sched.step(0) - 0.031_622_776_601_683_79).abs() <= 1e-15);
        let mut prev = f64::INFINITY;
        for s in [0usize, 1, 10, 1000, 1_000_000] {
            let tau = sched.step(s);
            assert!(tau > 0.0 && tau < prev);
            prev = tau;
        }
        // τ_{2s}/τ_s approaches 2^{−α} for large s.
        let big = 1_000_000;
        let ratio = sched.step(2 * big) / sched.step(big);
        assert!((ratio - 0.75f64.exp2().recip()).abs() <= 1e-4);
        assert!(StepSchedule::new(0.0, 1.0, 0.75).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 0.5).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 1.0).is_err());
    }

    struct ZeroProblem {
        manifold: Euclidean,
    }

    impl Problem<Euclidean> for ZeroProblem {
        fn manifold(&self) -> &Euclidean {
            &self.manifold
        }
        fn objective(&self, _p: &DVector<f64>, _r: &mut dyn RngCore) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&self, p: &DVector<f64>, _r: &mut dyn RngCore) -> Result<Tangent> {
            Ok(DVector::zeros(p.len()))
        }
        fn score(&self, p: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Tangent> {
            Ok(DVector::from_fn(p.len(), |_, _| StandardNormal.sample(rng)))
        }
    }

    #[test]
    fn zero_gradient_never_moves_the_iterate() {
        let problem = ZeroProblem {
            manifold: Euclidean::new(3),
        };
        let start = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let cfg = RunConfig {
            iters: 50,
            record_every: 0,
            ..RunConfig::default()
        };
        let out = run_if_rngd(&problem, start.clone(), &cfg, None).unwrap();
        assert_eq!(out.point, start);
        let out = run_rsgd(&problem, start.clone(), &cfg, None).unwrap();
        assert_eq!(out.point, start);
    }

    struct NanProblem {
        manifold: Euclidean,
    }

    impl Problem<Euclidean> for NanProblem {
        fn manifold(&self) -> &Euclidean {
            &self.manifold
        }
        fn objective(&self, _p: &DVector<f64>, _r: &mut dyn RngCore) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&self, p: &DVector<f64>, _r: &mut dyn RngCore) -> Result<Tangent> {
            Ok(DVector::from_element(p.len(), f64::NAN))
        }
        fn score(&self, p: &DVector<f64>, _r: &mut dyn RngCore) -> Result<Tangent> {
            Ok(DVector::zeros(p.len()))
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_the_iteration() {
        let problem = NanProblem {
            manifold: Euclidean::new(2),
        };
        let cfg = RunConfig {
            iters: 10,
            record_every: 0,
            ..RunConfig::default()
        };
        let err = run_rsgd(&problem, DVector::zeros(2), &cfg, None).unwrap_err();
        match err {
            OptimError::NonFinite { iter, what } => {
                assert_eq!(iter, 0);
                assert_eq!(what, "gradient");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn event_log_shows_transport_then_scores_then_step() {
        let mut rng = StdRng::seed_from_u64(1);
        let problem = QuadraticMeanProblem::new(randn_vec(3, &mut rng), spd(3, &mut rng), 2);
        let cfg = RunConfig {
            iters: 4,
            scores_per_iter: 2,
            record_events: true,
            record_every: 0,
            ..RunConfig::default()
        };
        let out = run_if_rngd(&problem, DVector::zeros(3), &cfg, None).unwrap();
        let per_iter = |s: usize| -> Vec<StepEvent> {
            out.trace
                .events
                .iter()
                .filter(|(i, _)| *i == s)
                .map(|(_, e)| *e)
                .collect()
        };
        assert_eq!(
            per_iter(0),
            vec![StepEvent::ScoreUpdate, StepEvent::ScoreUpdate, StepEvent::Step]
        );
        for s in 1..4 {
            assert_eq!(
                per_iter(s),
                vec![
                    StepEvent::StateTransport,
                    StepEvent::ScoreUpdate,
                    StepEvent::ScoreUpdate,
                    StepEvent::Step
                ],
                "iteration {s}"
            );
        }
    }

    #[test]
    fn reruns_are_bit_identical_and_streams_differ() {
        let mut rng = StdRng::seed_from_u64(2);
        let data_x = randn_mat(30, 3, &mut rng);
        let labels = DVector::from_fn(30, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
        let model = VbModel::new(LogisticData::new(data_x, labels).unwrap(), 9.0).unwrap();
        let start = GaussPoint::standard(3);
        let cfg = RunConfig {
            iters: 40,
            record_every: 10,
            ..RunConfig::default()
        };
        let run = |stream: u64| {
            let cfg = RunConfig { stream, ..cfg.clone() };
            run_vb(
                &model,
                GaussChart::Curved,
                VbMethod::NgdApprox,
                VbEstimator::CurvatureForm,
                8,
                64,
                start.clone(),
                &cfg,
                None,
            )
            .unwrap()
        };
        let (a, b, c) = (run(0), run(0), run(7));
        assert_eq!(a.trace.records.len(), b.trace.records.len());
        for (ra, rb) in a.trace.records.iter().zip(&b.trace.records) {
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
        }
        assert!(
            a.trace
                .records
                .iter()
                .zip(&c.trace.records)
                .any(|(ra, rc)| ra.objective.to_bits() != rc.objective.to_bits()),
            "distinct streams should explore distinct trajectories"
        );
    }

    #[test]
    fn rsgd_solves_the_euclidean_quadratic() {
        let mut rng = StdRng::seed_from_u64(3);
        let target = randn_vec(4, &mut rng);
        let problem = QuadraticMeanProblem::new(target.clone(), spd(4, &mut rng), 16);
        let cfg = RunConfig {
            iters: 4000,
            schedule: StepSchedule::new(2.0, 20.0, 0.75).unwrap(),
            record_every: 0,
            ..RunConfig::default()
        };
        let out = run_rsgd(&problem, DVector::zeros(4), &cfg, Some(&target)).unwrap();
        let dist = (out.point - &target).norm();
        assert!(dist <= 0.15, "final distance {dist:.4}");
    }

    #[test]
    fn preconditioned_run_tracks_the_predicted_decay_envelope() {
        // On the strongly convex instance the squared distance should
        // decay like log s / s^α; fit the constant on [1e3, 1e4] and check
        // the endpoint sits within 10x of the fit.
        let mut rng = StdRng::seed_from_u64(4);
        let target = randn_vec(4, &mut rng);
        let q = SymMatrix::new(DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                1.0 + i as f64 * 0.3
            } else {
                0.0
            }
        }))
        .unwrap();
        let problem = QuadraticMeanProblem::new(target.clone(), q, 8);
        let cfg = RunConfig {
            iters: 10_000,
            record_every: 250,
            ..RunConfig::default()
        };
        let out = run_if_rngd(&problem, DVector::zeros(4), &cfg, Some(&target)).unwrap();
        let alpha = cfg.schedule.alpha;
        let envelope = |s: f64| s.ln() / s.powf(alpha);
        let (mut num, mut den) = (0.0, 0.0);
        for r in &out.trace.records {
            if r.iter >= 1000 {
                let x = envelope(r.iter as f64);
                let y = r.ref_dist.unwrap().powi(2);
                num += x * y;
                den += x * x;
            }
        }
        let scale = num / den;
        let last = out.trace.records.last().unwrap();
        let actual = last.ref_dist.unwrap().powi(2);
        let predicted = scale * envelope(last.iter as f64);
        assert!(
            actual <= 10.0 * predicted,
            "endpoint {actual:.3e} exceeds 10x the fitted envelope {predicted:.3e}"
        );
    }

    #[test]
    fn long_score_stream_recovers_the_exact_natural_direction() {
        // Unit-covariance family in the flat chart: after many score
        // updates the state's action must align with the closed-form
        // natural gradient.
        let mut rng = StdRng::seed_from_u64(5);
        let d = 3;
        let manifold = GaussEuclidean::new(d);
        let q = GaussPoint::new(randn_vec(d, &mut rng), spd(d, &mut rng)).unwrap();
        let mut state = DenseInvFisher::for_manifold(&manifold, 1.0).unwrap();
        for _ in 0..10_000 {
            let y = q.sample(&mut rng).unwrap();
            let (s_mean, s_cov) = gaussian_score_euclidean(&q, &y).unwrap();
            state
                .sm_update(&manifold, &q, &gauss_chart_pack(&s_mean, s_cov.matrix()))
                .unwrap();
        }
        // Probe with a valid chart gradient (symmetric covariance block),
        // the only kind the optimizer ever preconditions.
        let probe = DVector::from_fn(manifold.dim(), |i, _| ((i + 1) as f64 * 0.37).sin());
        let (p_mean, p_cov) = gauss_chart_unpack(d, &probe);
        let p_cov = sym_part(&p_cov).unwrap();
        let g = gauss_chart_pack(&p_mean, p_cov.matrix());
        let approx = state.apply(&g).unwrap();
        let (n_mean, n_cov) = natural_gradient_flat(&q, &p_mean, &p_cov);
        let exact = gauss_chart_pack(&n_mean, n_cov.matrix());
        let cosine = approx.dot(&exact) / (approx.norm() * exact.norm());
        assert!(cosine >= 0.99, "cosine similarity {cosine:.4}");
    }

    #[test]
    fn exact_natural_gradient_matches_the_scalar_recursion() {
        // d=1, deterministic gradients: the flat-chart natural-gradient
        // iteration has a hand recursion μ' = μ − τσ²q(μ−c),
        // σ²' = σ² − τσ²(qσ² − 1).
        let problem = GaussTargetVb::exact(
            DVector::from_vec(vec![2.0]),
            SymMatrix::new(DMatrix::from_element(1, 1, 0.5)).unwrap(),
        );
        let start = GaussPoint::new(
            DVector::from_vec(vec![-1.0]),
            SymMatrix::new(DMatrix::from_element(1, 1, 4.0)).unwrap(),
        )
        .unwrap();
        let cfg = RunConfig {
            iters: 25,
            schedule: StepSchedule::new(5.0, 10.0, 0.75).unwrap(),
            record_every: 0,
            ..RunConfig::default()
        };
        let pre = flat_exact_preconditioner(1);
        let out =
            run_exact_ngd::<GaussEuclidean, _>(&problem, start.clone(), &cfg, None, &pre).unwrap();
        let (mut mu, mut var) = (start.mean[0], start.cov.matrix()[(0, 0)]);
        let q = 0.5;
        for s in 0..cfg.iters {
            let tau = cfg.schedule.step(s);
            let g_mu = q * (mu - 2.0);
            let g_var = 0.5 * (q - 1.0 / var);
            // Natural direction: (σ²g_μ, 2σ²g_σσ²).
            mu -= tau * var * g_mu;
            var -= tau * 2.0 * var * g_var * var;
        }
        assert!((out.point.mean[0] - mu).abs() <= 1e-12);
        assert!((out.point.cov.matrix()[(0, 0)] - var).abs() <= 1e-12);
    }

    #[test]
    fn exact_natural_gradient_is_stationary_at_the_matched_gaussian() {
        let mut rng = StdRng::seed_from_u64(6);
        let center = randn_vec(3, &mut rng);
        let precision = spd(3, &mut rng);
        let problem = GaussTargetVb::exact(center.clone(), precision.clone());
        let cov = SymMatrix::new(
            sym_eig(&precision)
                .unwrap()
                .apply_fn(f64::recip)
                .matrix()
                .clone(),
        )
        .unwrap();
        let matched = GaussPoint::new(center, cov).unwrap();
        let cfg = RunConfig {
            iters: 30,
            record_every: 0,
            ..RunConfig::default()
        };
        let pre = curved_exact_preconditioner(3);
        let out =
            run_exact_ngd::<BwGaussian, _>(&problem, matched.clone(), &cfg, None, &pre).unwrap();
        assert!((&out.point.mean - &matched.mean).norm() <= 1e-12);
        assert!((out.point.cov.matrix() - matched.cov.matrix()).norm() <= 1e-12);
    }

    #[test]
    fn curved_chart_run_reaches_the_gaussian_target() {
        // Stochastic-gradient run on the transport-metric chart against an
        // exactly Gaussian target: the closed-form divergence to the
        // optimum must be small after a modest budget.
        let mut rng = StdRng::seed_from_u64(7);
        let d = 5;
        let center = randn_vec(d, &mut rng);
        let precision = spd(d, &mut rng);
        let problem = GaussTargetVb::new(center.clone(), precision.clone(), 100);
        let start = GaussPoint::standard(d);
        let cfg = RunConfig {
            iters: 5000,
            schedule: StepSchedule::new(3.0, 100.0, 0.75).unwrap(),
            record_every: 0,
            ..RunConfig::default()
        };
        let out = run_if_rngd::<BwGaussian, _>(&problem, start, &cfg, None).unwrap();
        let optimum = GaussPoint::new(
            center,
            SymMatrix::new(
                sym_eig(&precision)
                    .unwrap()
                    .apply_fn(f64::recip)
                    .matrix()
                    .clone(),
            )
            .unwrap(),
        )
        .unwrap();
        let kl = gaussian_kl(&out.point, &optimum).unwrap();
        assert!(kl <= 1e-3, "divergence from the target: {kl:.2e}");
    }

    #[test]
    fn oversized_steps_are_halved_and_clipping_is_counted() {
        let d = 2;
        let problem = GaussTargetVb::exact(
            DVector::zeros(d),
            SymMatrix::new(DMatrix::identity(d, d) * 100.0).unwrap(),
        );
        let start = GaussPoint::standard(d);
        let cfg = RunConfig {
            iters: 40,
            schedule: StepSchedule::new(50.0, 100.0, 0.75).unwrap(),
            record_every: 0,
            ..RunConfig::default()
        };
        // Curved chart: a large covariance step violates the retraction
        // domain and must be halved, not fatal.
        let out = run_rsgd::<BwGaussian, _>(&problem, start.clone(), &cfg, None).unwrap();
        assert!(out.trace.halving_events > 0, "expected step halvings");
        assert!(out.point.cov.matrix()[(0, 0)].is_finite());
        // Flat chart: the same oversized step leaves the positive cone and
        // must likewise be halved rather than silently floored.
        let out = run_rsgd::<GaussEuclidean, _>(&problem, start, &cfg, None).unwrap();
        assert!(out.trace.halving_events > 0, "expected step halvings");
        assert!(out.point.cov.matrix()[(0, 0)].is_finite());
    }

    /// A flat-chart problem whose constant gradient is sized so one step
    /// lands a covariance eigenvalue at a tiny positive value below the
    /// floor: a graze, which must be floored and counted, not halved.
    struct GrazingStep {
        manifold: GaussEuclidean,
        cov_grad: DMatrix<f64>,
    }

    impl Problem<GaussEuclidean> for GrazingStep {
        fn manifold(&self) -> &GaussEuclidean {
            &self.manifold
        }
        fn objective(&self, _q: &GaussPoint, _rng: &mut dyn RngCore) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&self, _q: &GaussPoint, _rng: &mut dyn RngCore) -> Result<Tangent> {
            Ok(gauss_chart_pack(&DVector::zeros(2), &self.cov_grad))
        }
        fn score(&self, _q: &GaussPoint, _rng: &mut dyn RngCore) -> Result<Tangent> {
            Ok(gauss_chart_pack(&DVector::zeros(2), &DMatrix::zeros(2, 2)))
        }
    }

    #[test]
    fn grazing_retractions_count_clips_without_halving() {
        let schedule = StepSchedule::new(1.0, 100.0, 0.75).unwrap();
        let tau0 = schedule.step(0);
        // One plain step moves Σ from I to I − τ₀·G; aim eigenvalue 0 at
        // +1e-10 (inside (0, floor)) and leave eigenvalue 1 untouched.
        let target = 1e-10;
        let problem = GrazingStep {
            manifold: GaussEuclidean::new(2),
            cov_grad: DMatrix::from_diagonal(&DVector::from_vec(vec![
                (1.0 - target) / tau0,
                0.0,
            ])),
        };
        let cfg = RunConfig {
            iters: 1,
            schedule,
            record_every: 0,
            ..RunConfig::default()
        };
        let out = run_rsgd::<GaussEuclidean, _>(&problem, GaussPoint::standard(2), &cfg, None)
            .unwrap();
        assert_eq!(out.trace.clip_events, 1, "expected exactly one clip");
        assert_eq!(out.trace.halving_events, 0, "graze must not halve");
        let eig = sym_eig(&out.point.cov).unwrap();
        assert!(eig.min() >= COVARIANCE_EIG_FLOOR * 0.999);
    }

    struct StiefelProcrustes {
        target: DMatrix<f64>,
        manifold: Stiefel,
    }

    impl Problem<Stiefel> for StiefelProcrustes {
        fn manifold(&self) -> &Stiefel {
            &self.manifold
        }
        fn objective(&self, x: &DMatrix<f64>, _r: &mut dyn RngCore) -> Result<f64> {
            Ok(0.5 * (x - &self.target).norm_squared())
        }
        fn gradient(&self, x: &DMatrix<f64>, _r: &mut dyn RngCore) -> Result<Tangent> {
            let g = st_project(x, &(x - &self.target));
            Ok(crate::stiefel::st_chart_pack(&g))
        }
        fn score(&self, x: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<Tangent> {
            let z = DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| StandardNormal.sample(rng));
            Ok(crate::stiefel::st_chart_pack(&st_project(x, &z)))
        }
    }

    #[test]
    fn orthonormality_is_maintained_across_a_run() {
        let mut rng = StdRng::seed_from_u64(8);
        let (n, p) = (8, 3);
        let target = st_reorthonormalize(&randn_mat(n, p, &mut rng));
        let problem = StiefelProcrustes {
            target: target.clone(),
            manifold: Stiefel::new(n, p),
        };
        let start = st_reorthonormalize(&randn_mat(n, p, &mut rng));
        let cfg = RunConfig {
            iters: 300,
            schedule: StepSchedule::new(2.0, 10.0, 0.75).unwrap(),
            record_every: 0,
            ..RunConfig::default()
        };
        let mut eval_rng = StdRng::seed_from_u64(9);
        let before = problem.objective(&start, &mut eval_rng).unwrap();
        let out = run_rsgd(&problem, start, &cfg, Some(&target)).unwrap();
        let after = problem.objective(&out.point, &mut eval_rng).unwrap();
        assert!(st_drift(&out.point) <= 1e-8, "orthonormality drifted");
        assert!(after < 0.05 * before, "objective {before:.3} -> {after:.3}");
    }

    fn planted_multinomial(
        n: usize,
        p: usize,
        k: usize,
        r: usize,
        seed: u64,
    ) -> MultinomialData {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = randn_mat(n, p, &mut rng);
        let b = randn_mat(p, r, &mut rng) * randn_mat(r, k - 1, &mut rng) * 1.5;
        let alpha = randn_vec(k - 1, &mut rng) * 0.2;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let eta = b.transpose() * x.row(i).transpose() + &alpha;
            let m = eta.iter().fold(0.0f64, |acc, &v| acc.max(v));
            let mut weights: Vec<f64> = eta.iter().map(|&v| (v - m).exp()).collect();
            weights.push((-m).exp());
            let total: f64 = weights.iter().sum();
            let draw: f64 = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut label = k - 1;
            for (j, w) in weights.iter().enumerate() {
                cum += w;
                if draw < cum {
                    label = j;
                    break;
                }
            }
            labels.push(label);
        }
        MultinomialData::new(x, labels, k).unwrap()
    }

    #[test]
    fn reduced_rank_chart_gradient_matches_directional_derivatives() {
        let data = planted_multinomial(40, 5, 4, 2, 10);
        let model = ReducedRankModel::new(data);
        let problem = ReducedRankProblem::new(&model, 2, 40);
        let manifold = Problem::manifold(&problem);
        let mut rng = StdRng::seed_from_u64(11);
        let point = manifold.random_point(&mut rng);
        // Full-index gradient, projected.
        let idx: Vec<usize> = (0..model.data().n()).collect();
        let (g_b, g_alpha) = model.mean_nll_grad(&point.0.to_dense(), &point.1, &idx);
        let chart_grad = manifold.project(&point, &problem.pack(&g_b, &g_alpha));
        for _ in 0..5 {
            let xi = manifold.random_tangent(&point, &mut rng);
            let h = 1e-5;
            let plus = manifold.retract(&point, &(&xi * h)).unwrap();
            let minus = manifold.retract(&point, &(&xi * -h)).unwrap();
            let fd = (model.mean_nll(&plus.0.to_dense(), &plus.1)
                - model.mean_nll(&minus.0.to_dense(), &minus.1))
                / (2.0 * h);
            let analytic = manifold.inner(&point, &chart_grad, &xi);
            assert!(
                (fd - analytic).abs() <= 1e-4 * analytic.abs().max(1e-3),
                "directional derivative {fd:.6e} vs {analytic:.6e}"
            );
        }
    }

    #[test]
    fn full_rank_extrinsic_run_equals_the_euclidean_run() {
        // With the rank equal to the smaller side, the tangent space is
        // the whole ambient space and retraction is re-factorization, so
        // the extrinsic baseline must match a plain Euclidean run of the
        // same stream.
        let (n, p, k) = (30, 5, 4);
        let data = planted_multinomial(n, p, k, k - 1, 12);
        let model = ReducedRankModel::new(data);
        let problem = ReducedRankProblem::new(&model, k - 1, 16);
        let manifold = Problem::manifold(&problem);
        let mut rng = StdRng::seed_from_u64(13);
        let start = manifold.random_point(&mut rng);
        let ambient_start = {
            let mut v = DVector::zeros(p * (k - 1) + (k - 1));
            v.rows_mut(0, p * (k - 1))
                .copy_from_slice(start.0.to_dense().as_slice());
            v.rows_mut(p * (k - 1), k - 1).copy_from(&start.1);
            v
        };
        let cfg = RunConfig {
            iters: 40,
            curvature: CurvatureSpec::Window { cap: 10 },
            record_every: 0,
            ..RunConfig::default()
        };
        let extrinsic = run_extrinsic_ifngd(&problem, start, &cfg, None).unwrap();

        struct Flattened<'a> {
            model: &'a ReducedRankModel,
            manifold: Euclidean,
            p: usize,
            k: usize,
            batch: usize,
        }
        impl Flattened<'_> {
            fn unpack(&self, v: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
                let nb = self.p * (self.k - 1);
                (
                    DMatrix::from_column_slice(self.p, self.k - 1, v.rows(0, nb).as_slice()),
                    v.rows(nb, self.k - 1).into_owned(),
                )
            }
        }
        impl Problem<Euclidean> for Flattened<'_> {
            fn manifold(&self) -> &Euclidean {
                &self.manifold
            }
            fn objective(&self, v: &DVector<f64>, _r: &mut dyn RngCore) -> Result<f64> {
                let (b, alpha) = self.unpack(v);
                Ok(self.model.mean_nll(&b, &alpha))
            }
            fn gradient(&self, v: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Tangent> {
                let (b, alpha) = self.unpack(v);
                let idx: Vec<usize> = (0..self.batch)
                    .map(|_| rng.gen_range(0..self.model.data().n()))
                    .collect();
                let (g_b, g_alpha) = self.model.mean_nll_grad(&b, &alpha, &idx);
                let mut out = DVector::zeros(v.len());
                out.rows_mut(0, g_b.len()).copy_from_slice(g_b.as_slice());
                out.rows_mut(g_b.len(), g_alpha.len()).copy_from(&g_alpha);
                Ok(out)
            }
            fn score(&self, v: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Tangent> {
                let (b, alpha) = self.unpack(v);
                let (s_b, s_alpha) = self.model.sampled_model_score(&b, &alpha, rng);
                let mut out = DVector::zeros(v.len());
                out.rows_mut(0, s_b.len()).copy_from_slice(s_b.as_slice());
                out.rows_mut(s_b.len(), s_alpha.len()).copy_from(&s_alpha);
                Ok(out)
            }
        }
        let flat_problem = Flattened {
            model: &model,
            manifold: Euclidean::new(p * (k - 1) + (k - 1)),
            p,
            k,
            batch: 16,
        };
        let euclidean = run_if_rngd(&flat_problem, ambient_start, &cfg, None).unwrap();
        let (b_eu, alpha_eu) = flat_problem.unpack(&euclidean.point);
        let gap_b = (extrinsic.point.0.to_dense() - b_eu).norm();
        let gap_a = (&extrinsic.point.1 - alpha_eu).norm();
        assert!(gap_b <= 1e-9, "coefficient gap {gap_b:.3e}");
        assert!(gap_a <= 1e-9, "intercept gap {gap_a:.3e}");
    }

    #[test]
    fn extrinsic_run_maintains_the_rank_constraint() {
        let data = planted_multinomial(200, 8, 5, 2, 14);
        let model = ReducedRankModel::new(data);
        let problem = ReducedRankProblem::new(&model, 2, 32);
        let manifold = AmbientProblem::manifold(&problem);
        let mut rng = StdRng::seed_from_u64(15);
        let start = manifold.random_point(&mut rng);
        let cfg = RunConfig {
            iters: 200,
            curvature: CurvatureSpec::Window { cap: 50 },
            record_every: 0,
            ..RunConfig::default()
        };
        let out = run_extrinsic_ifngd(&problem, start, &cfg, None).unwrap();
        assert_eq!(out.point.0.rank(), 2);
        assert!(st_drift(&out.point.0.u) <= 1e-8);
        assert!(st_drift(&out.point.0.v) <= 1e-8);
        assert!(out.point.0.sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn flow_run_improves_the_objective_and_keeps_layers_orthogonal() {
        use crate::objectives::GaussianQuadTarget;
        let d = 3;
        let flow = SylvesterFlow::new(d);
        let target = GaussianQuadTarget::new(
            DVector::from_element(d, 2.0),
            SymMatrix::new(DMatrix::identity(d, d) * 0.8).unwrap(),
        );
        let problem = FlowVbProblem::new(&flow, &target, 8, 400);
        let start = flow.identity_point();
        let cfg = RunConfig {
            iters: 400,
            curvature: CurvatureSpec::Window { cap: 50 },
            scores_per_iter: 3,
            record_every: 200,
            ..RunConfig::default()
        };
        let out = run_if_rngd(&problem, start, &cfg, None).unwrap();
        let first = out.trace.records.first().unwrap().objective;
        let last = out.trace.records.last().unwrap().objective;
        assert!(
            last < first - 0.5,
            "objective should improve: {first:.3} -> {last:.3}"
        );
        assert!(st_drift(&out.point.0 .0) <= 1e-6);
        assert!(st_drift(&out.point.0 .1) <= 1e-6);
    }
}
