//! Statistical objectives driving the optimizer.
//!
//! Three model families at desk scale:
//!
//! 1. **Gaussian variational inference for Bayesian logistic regression**
//!    ([`VbModel`]): minimize the negative evidence lower bound
//!    `NELBO(μ, Σ) = E_q[V] − ½ log det Σ − (d/2) log 2πe` over Gaussian
//!    variational parameters, where `V` is the negative log joint of the
//!    logistic model. Three interchangeable gradient estimators are
//!    provided — a curvature-form estimator using the identities
//!    `∇_μ E[V] = E[∇V]` and `∇_Σ E[V] = ½E[∇²V]`, a reparametrization
//!    (pathwise) estimator, and a score-function estimator — all returning
//!    flat `(μ, Σ)` gradients that chart adapters map into either Gaussian
//!    geometry.
//! 2. **Reduced-rank multinomial logistic regression**
//!    ([`ReducedRankModel`]): the coefficient matrix is constrained to a
//!    fixed-rank manifold, intercepts stay Euclidean. Model scores for the
//!    curvature state resample the class label from the model at a random
//!    data point, which has exactly zero conditional mean.
//! 3. **Orthogonal-layer normalizing flow** ([`SylvesterFlow`]) with a
//!    pluggable unnormalized target ([`FlowTarget`]), including a two-layer
//!    Bayesian neural network posterior ([`BnnTarget`]). Both flow layers
//!    are square orthogonal, so the log-density of a sampled point and
//!    the parameter score at it are available in closed form without
//!    numerical inversion.
//!
//! All estimators consume a caller-provided random source, so runs are
//! reproducible stream-for-stream. Gradients returned here are plain
//! parameter-space derivatives; Riemannian projections and metric solves
//! happen in the chart adapters that wrap these models for the optimizer.

use std::ops::{AddAssign, SubAssign};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::bw::GaussPoint;
use crate::linalg::{sym_eig, LinalgError, SpectralDecomposition, SymMatrix};
use crate::manifold::{GeometryError, Tangent};

/// `log 2π`, shared by the Gaussian density expressions.
const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Errors from objective construction and evaluation.
#[derive(Debug, Error)]
pub enum ObjectiveError {
    /// Malformed data or hyperparameters.
    #[error("invalid objective input: {0}")]
    InvalidInput(String),
    /// Underlying linear-algebra failure (for example a non-SPD
    /// covariance).
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    /// Underlying geometry failure.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Result alias for objective evaluations.
pub type Result<T> = std::result::Result<T, ObjectiveError>;

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + eᶻ)`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `log σ'(z) = −softplus(z) − softplus(−z)`, stable at both tails.
pub fn log_sigmoid_deriv(z: f64) -> f64 {
    -softplus(z) - softplus(-z)
}

// ---------------------------------------------------------------------------
// Gaussian variational inference for logistic regression
// ---------------------------------------------------------------------------

/// A binary-label design: rows of `x` are feature vectors, `y ∈ {0, 1}`.
#[derive(Debug, Clone)]
pub struct LogisticData {
    /// `n×d` design matrix.
    pub x: DMatrix<f64>,
    /// Length-`n` label vector with entries in `{0, 1}`.
    pub y: DVector<f64>,
}

impl LogisticData {
    /// Validates shapes and label values.
    ///
    /// # Errors
    ///
    /// [`ObjectiveError::InvalidInput`] on empty data, shape mismatch, or
    /// labels outside `{0, 1}`.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(ObjectiveError::InvalidInput("empty design matrix".into()));
        }
        if y.len() != x.nrows() {
            return Err(ObjectiveError::InvalidInput(format!(
                "{} labels for {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ObjectiveError::InvalidInput(
                "labels must be 0 or 1".into(),
            ));
        }
        Ok(Self { x, y })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Flat-chart gradient of the variational objective, together with the
/// objective estimate from the same draw.
#[derive(Debug, Clone)]
pub struct GaussGrad {
    /// Objective (negative evidence lower bound) estimate.
    pub value: f64,
    /// Gradient with respect to the mean.
    pub g_mean: DVector<f64>,
    /// Gradient with respect to the covariance (full-matrix derivative,
    /// symmetric).
    pub g_cov: DMatrix<f64>,
}

/// Which stochastic gradient estimator to use for the variational
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VbEstimator {
    /// Curvature-form estimator: `∇_μ = E[∇V]`, `∇_Σ = ½E[∇²V] − ½Σ⁻¹`.
    CurvatureForm,
    /// Pathwise estimator through `y = μ + Σ^{1/2} ε`, with the entropy
    /// term also differentiated along the path.
    Reparam,
    /// Score-function estimator `E[(log q − log p̄) ∇ log q]`, optionally
    /// with a mean baseline subtracted.
    ScoreFunction {
        /// Subtract the batch-mean of the integrand as a control variate.
        control_variate: bool,
    },
}

/// Bayesian logistic regression with a `N(0, prior_var·I)` coefficient
/// prior and a Gaussian variational family.
#[derive(Debug, Clone)]
pub struct VbModel {
    data: LogisticData,
    prior_var: f64,
}

impl VbModel {
    /// Builds the model.
    ///
    /// # Errors
    ///
    /// [`ObjectiveError::InvalidInput`] if `prior_var <= 0`.
    pub fn new(data: LogisticData, prior_var: f64) -> Result<Self> {
        if !(prior_var > 0.0) || !prior_var.is_finite() {
            return Err(ObjectiveError::InvalidInput(format!(
                "prior variance must be positive, got {prior_var}"
            )));
        }
        Ok(Self { data, prior_var })
    }

    /// Coefficient dimension.
    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    /// Training data.
    pub fn data(&self) -> &LogisticData {
        &self.data
    }

    /// Prior variance.
    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    /// Negative log joint `V(β) = Σᵢ [softplus(xᵢᵀβ) − yᵢ xᵢᵀβ]
    /// + ‖β‖²/(2σ²) + (d/2) log 2πσ²`.
    pub fn neg_log_joint(&self, beta: &DVector<f64>) -> f64 {
        let z = &self.data.x * beta;
        let mut v = 0.0;
        for i in 0..self.data.n() {
            v += softplus(z[i]) - self.data.y[i] * z[i];
        }
        let d = self.dim() as f64;
        v + beta.norm_squared() / (2.0 * self.prior_var)
            + 0.5 * d * (LN_2PI + self.prior_var.ln())
    }

    /// Gradient `∇V(β) = Xᵀ(σ(Xβ) − y) + β/σ²`.
    pub fn neg_log_joint_grad(&self, beta: &DVector<f64>) -> DVector<f64> {
        let z = &self.data.x * beta;
        let resid = DVector::from_fn(self.data.n(), |i, _| sigmoid(z[i]) - self.data.y[i]);
        self.data.x.transpose() * resid + beta / self.prior_var
    }

    /// Hessian `∇²V(β) = Xᵀ diag(σ'(Xβ)) X + I/σ²`.
    pub fn neg_log_joint_hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let z = &self.data.x * beta;
        let weights = DVector::from_fn(self.data.n(), |i, _| {
            let s = sigmoid(z[i]);
            s * (1.0 - s)
        });
        self.weighted_gram(&weights)
    }

    /// `Xᵀ diag(w) X + I/σ²` — one `n·d²` pass.
    fn weighted_gram(&self, weights: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut scaled = self.data.x.clone();
        for i in 0..self.data.n() {
            let w = weights[i];
            for j in 0..d {
                scaled[(i, j)] *= w;
            }
        }
        let mut gram = self.data.x.transpose() * scaled;
        for j in 0..d {
            gram[(j, j)] += 1.0 / self.prior_var;
        }
        gram
    }

    /// Draws `batch` latent normals and the matching coefficient samples
    /// `y = μ + Σ^{1/2} ε`.
    fn draw(
        &self,
        q: &GaussPoint,
        eig: &SpectralDecomposition,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim();
        let eps = DMatrix::from_fn(d, batch, |_, _| StandardNormal.sample(rng));
        let sqrt = sqrt_decomposition(eig);
        let mut ys = sqrt_apply(&sqrt, &eps);
        for b in 0..batch {
            ys.column_mut(b).add_assign(&q.mean);
        }
        (eps, ys)
    }

    /// Mean of `V` over the columns of `ys`.
    fn mean_energy(&self, ys: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for b in 0..ys.ncols() {
            total += self.neg_log_joint(&ys.column(b).into_owned());
        }
        total / ys.ncols() as f64
    }

    /// Mean of `V(μ + Σ^{1/2}ε_b)` for a fixed noise panel (deterministic
    /// in `(μ, Σ)`; used by derivative checks).
    pub fn mean_energy_with_noise(&self, q: &GaussPoint, eps: &DMatrix<f64>) -> Result<f64> {
        let eig = spd_eig(&q.cov)?;
        let sqrt = sqrt_decomposition(&eig);
        let mut ys = sqrt_apply(&sqrt, eps);
        for b in 0..eps.ncols() {
            ys.column_mut(b).add_assign(&q.mean);
        }
        Ok(self.mean_energy(&ys))
    }

    /// Pathwise gradient of [`VbModel::mean_energy_with_noise`] for the
    /// same fixed noise panel: `(mean ∇V, L_S(sym(mean ∇V εᵀ)))` where
    /// `L_S` solves `S X + X S = ·` against `S = Σ^{1/2}`.
    pub fn mean_energy_reparam_grad(
        &self,
        q: &GaussPoint,
        eps: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let eig = spd_eig(&q.cov)?;
        let sqrt = sqrt_decomposition(&eig);
        let mut ys = sqrt_apply(&sqrt, eps);
        for b in 0..eps.ncols() {
            ys.column_mut(b).add_assign(&q.mean);
        }
        let grads = self.batch_energy_grads(&ys);
        let batch = eps.ncols() as f64;
        let g_mean = grads.column_sum() / batch;
        let m_s = &grads * eps.transpose() / batch;
        let g_cov = lyap_sym(&sqrt, &m_s)?;
        Ok((g_mean, g_cov))
    }

    /// Columns of `∇V` at each sample column.
    fn batch_energy_grads(&self, ys: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, batch) = (self.dim(), ys.ncols());
        let z = &self.data.x * ys; // n×B
        let mut resid = z.map(sigmoid);
        for b in 0..batch {
            resid.column_mut(b).sub_assign(&self.data.y);
        }
        let mut grads = self.data.x.transpose() * resid; // d×B
        for b in 0..batch {
            for j in 0..d {
                grads[(j, b)] += ys[(j, b)] / self.prior_var;
            }
        }
        grads
    }

    /// Objective estimate alone, for trace logging: `mean V − ½ log det Σ −
    /// (d/2) log 2πe` over a fresh batch.
    pub fn nelbo(&self, q: &GaussPoint, batch: usize, rng: &mut dyn RngCore) -> Result<f64> {
        let eig = spd_eig(&q.cov)?;
        let (_, ys) = self.draw(q, &eig, batch, rng);
        Ok(self.mean_energy(&ys) - entropy_terms(&eig, self.dim()))
    }

    /// One stochastic gradient of the variational objective in the flat
    /// `(μ, Σ)` chart.
    ///
    /// # Errors
    ///
    /// Propagates SPD failures of the variational covariance.
    pub fn gradient(
        &self,
        q: &GaussPoint,
        estimator: VbEstimator,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<GaussGrad> {
        if batch == 0 {
            return Err(ObjectiveError::InvalidInput(
                "batch size must be positive".into(),
            ));
        }
        match estimator {
            VbEstimator::CurvatureForm => self.curvature_form_gradient(q, batch, rng),
            VbEstimator::Reparam => self.reparam_gradient(q, batch, rng),
            VbEstimator::ScoreFunction { control_variate } => {
                self.score_function_gradient(q, batch, control_variate, rng)
            }
        }
    }

    fn curvature_form_gradient(
        &self,
        q: &GaussPoint,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<GaussGrad> {
        let eig = spd_eig(&q.cov)?;
        let (_, ys) = self.draw(q, &eig, batch, rng);
        let g_mean = self.batch_energy_grads(&ys).column_sum() / batch as f64;
        // Averaged curvature weights: one weighted Gram pass per call
        // instead of one per sample.
        let z = &self.data.x * &ys; // n×B
        let mut w_bar = DVector::zeros(self.data.n());
        for i in 0..self.data.n() {
            let mut acc = 0.0;
            for b in 0..batch {
                let s = sigmoid(z[(i, b)]);
                acc += s * (1.0 - s);
            }
            w_bar[i] = acc / batch as f64;
        }
        let hess_mean = self.weighted_gram(&w_bar);
        let inv = eig.apply_fn(f64::recip);
        let g_cov = 0.5 * (hess_mean - inv.matrix());
        Ok(GaussGrad {
            value: self.mean_energy(&ys) - entropy_terms(&eig, self.dim()),
            g_mean,
            g_cov,
        })
    }

    fn reparam_gradient(
        &self,
        q: &GaussPoint,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<GaussGrad> {
        let eig = spd_eig(&q.cov)?;
        let (eps, ys) = self.draw(q, &eig, batch, rng);
        let sqrt = sqrt_decomposition(&eig);
        let inv = eig.apply_fn(f64::recip);
        // Path derivative of V + log q through y, holding the explicit
        // parameter dependence of log q out (it has zero mean).
        let mut dh = -self.batch_energy_grads(&ys); // −∇V(y_b)
        for b in 0..batch {
            let delta = ys.column(b) - &q.mean;
            dh.column_mut(b).add_assign(&(inv.matrix() * delta));
        }
        let g_mean = -dh.column_sum() / batch as f64;
        let m_s = -(&dh * eps.transpose()) / batch as f64;
        let g_cov = lyap_sym(&sqrt, &m_s)?;
        Ok(GaussGrad {
            value: self.mean_energy(&ys) - entropy_terms(&eig, self.dim()),
            g_mean,
            g_cov,
        })
    }

    fn score_function_gradient(
        &self,
        q: &GaussPoint,
        batch: usize,
        control_variate: bool,
        rng: &mut dyn RngCore,
    ) -> Result<GaussGrad> {
        let d = self.dim();
        let eig = spd_eig(&q.cov)?;
        let (_, ys) = self.draw(q, &eig, batch, rng);
        let inv = eig.apply_fn(f64::recip);
        let log_det: f64 = eig.values.iter().map(|&v| v.ln()).sum();
        // Integrand f_b = log q(y_b) + V(y_b); E[f] is the objective.
        let mut f = DVector::zeros(batch);
        for b in 0..batch {
            let y = ys.column(b).into_owned();
            let delta = &y - &q.mean;
            let w = inv.matrix() * &delta;
            let log_q = -0.5 * (d as f64 * LN_2PI + log_det + delta.dot(&w));
            f[b] = log_q + self.neg_log_joint(&y);
        }
        let value = f.mean();
        let baseline = if control_variate { value } else { 0.0 };
        let mut g_mean = DVector::zeros(d);
        let mut g_cov = DMatrix::zeros(d, d);
        let mut weight_total = 0.0;
        for b in 0..batch {
            let delta = ys.column(b) - &q.mean;
            let w = inv.matrix() * delta;
            let weight = (f[b] - baseline) / batch as f64;
            g_mean.axpy(weight, &w, 1.0);
            // ∇_Σ log q = ½(wwᵀ − Σ⁻¹); the Σ⁻¹ part is sample-independent.
            g_cov.ger(0.5 * weight, &w, &w, 1.0);
            weight_total += weight;
        }
        g_cov -= inv.matrix() * (0.5 * weight_total);
        Ok(GaussGrad {
            value,
            g_mean,
            g_cov,
        })
    }
}

/// Entropy-side terms of the objective: `½ log det Σ + (d/2) log 2πe`.
fn entropy_terms(eig: &SpectralDecomposition, d: usize) -> f64 {
    let log_det: f64 = eig.values.iter().map(|&v| v.ln()).sum();
    0.5 * log_det + 0.5 * d as f64 * (LN_2PI + 1.0)
}

/// Eigendecomposition with an SPD gate.
fn spd_eig(cov: &SymMatrix) -> Result<SpectralDecomposition> {
    let eig = sym_eig(cov)?;
    if !eig.is_spd() {
        return Err(ObjectiveError::Linalg(LinalgError::SingularMetric(
            format!(
                "variational covariance is not positive definite (min eig {:.3e})",
                eig.min()
            ),
        )));
    }
    Ok(eig)
}

/// Square-root frame of an SPD eigendecomposition.
fn sqrt_decomposition(eig: &SpectralDecomposition) -> SpectralDecomposition {
    SpectralDecomposition {
        vectors: eig.vectors.clone(),
        values: eig.values.map(f64::sqrt),
    }
}

/// `S · M` against a square-root frame.
fn sqrt_apply(sqrt: &SpectralDecomposition, m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = &sqrt.vectors;
    let mut tilde = p.transpose() * m;
    for i in 0..tilde.nrows() {
        let s = sqrt.values[i];
        for j in 0..tilde.ncols() {
            tilde[(i, j)] *= s;
        }
    }
    p * tilde
}

/// Solves `S X + X S = sym(M)` against the square-root frame of `Σ`,
/// converting a root-space derivative into a covariance derivative.
fn lyap_sym(sqrt: &SpectralDecomposition, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = 0.5 * (m + m.transpose());
    Ok(crate::linalg::lyapunov_solve_general(sqrt, &sym)?)
}

/// Packs flat `(μ, Σ)` gradients into the flat-chart coordinate layout
/// `[g_μ | vec g_Σ]`.
pub fn flat_chart_gradient(g: &GaussGrad) -> Tangent {
    crate::bw::gauss_chart_pack(&g.g_mean, &g.g_cov)
}

/// Packs flat `(μ, Σ)` gradients into the curved-chart Riemannian gradient
/// `[g_μ | vec 2·g_Σ]` (the metric solve of the chart differential has
/// this closed form).
pub fn bw_chart_gradient(g: &GaussGrad) -> Tangent {
    crate::bw::gauss_chart_pack(&g.g_mean, &(2.0 * &g.g_cov))
}

// ---------------------------------------------------------------------------
// Reduced-rank multinomial logistic regression
// ---------------------------------------------------------------------------

/// Multiclass design: rows of `x` are feature vectors, labels in
/// `0..n_classes` with the last class as the reference (zero logit).
#[derive(Debug, Clone)]
pub struct MultinomialData {
    /// `n×p` design matrix.
    pub x: DMatrix<f64>,
    /// Class labels, each `< n_classes`.
    pub y: Vec<usize>,
    /// Number of classes `K >= 2`.
    pub n_classes: usize,
}

impl MultinomialData {
    /// Validates shapes and label ranges.
    ///
    /// # Errors
    ///
    /// [`ObjectiveError::InvalidInput`] on malformed input.
    pub fn new(x: DMatrix<f64>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(ObjectiveError::InvalidInput("empty design matrix".into()));
        }
        if y.len() != x.nrows() {
            return Err(ObjectiveError::InvalidInput(format!(
                "{} labels for {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if n_classes < 2 {
            return Err(ObjectiveError::InvalidInput(
                "need at least two classes".into(),
            ));
        }
        if y.iter().any(|&c| c >= n_classes) {
            return Err(ObjectiveError::InvalidInput(
                "label out of class range".into(),
            ));
        }
        Ok(Self { x, y, n_classes })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Multinomial logistic regression with a rank-constrained coefficient
/// matrix `B` (`p×(K−1)`) and free intercepts `α` (`K−1`). The last class
/// is the reference with logit zero; the model only ever consumes the
/// dense product `Bᵀx + α`, so any factorization of the same `B` gives
/// identical likelihoods.
#[derive(Debug, Clone)]
pub struct ReducedRankModel {
    data: MultinomialData,
}

impl ReducedRankModel {
    /// Wraps a validated dataset.
    pub fn new(data: MultinomialData) -> Self {
        Self { data }
    }

    /// Training data.
    pub fn data(&self) -> &MultinomialData {
        &self.data
    }

    /// Number of non-reference classes `K − 1`.
    pub fn coef_classes(&self) -> usize {
        self.data.n_classes - 1
    }

    /// Non-reference logits `η = Bᵀxᵢ + α`.
    fn logits(&self, b: &DMatrix<f64>, alpha: &DVector<f64>, i: usize) -> DVector<f64> {
        let xi = self.data.x.row(i).transpose();
        b.transpose() * xi + alpha
    }

    /// Full class-probability vector (length `K`, reference last),
    /// computed with a max-shifted softmax.
    pub fn class_probabilities(
        &self,
        b: &DMatrix<f64>,
        alpha: &DVector<f64>,
        i: usize,
    ) -> DVector<f64> {
        let eta = self.logits(b, alpha, i);
        let m = eta.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let mut p = DVector::zeros(self.data.n_classes);
        let mut denom = (-m).exp();
        for j in 0..eta.len() {
            let e = (eta[j] - m).exp();
            p[j] = e;
            denom += e;
        }
        p[self.data.n_classes - 1] = (-m).exp();
        p / denom
    }

    /// Mean negative log-likelihood over the full dataset.
    pub fn mean_nll(&self, b: &DMatrix<f64>, alpha: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..self.data.n() {
            let eta = self.logits(b, alpha, i);
            let m = eta.iter().fold(0.0f64, |acc, &v| acc.max(v));
            let mut denom = (-m).exp();
            for &v in eta.iter() {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            let target = if self.data.y[i] + 1 == self.data.n_classes {
                0.0
            } else {
                eta[self.data.y[i]]
            };
            total += lse - target;
        }
        total / self.data.n() as f64
    }

    /// Mean NLL gradient over the given sample indices, as dense parameter
    /// derivatives `(∂B, ∂α)`.
    pub fn mean_nll_grad(
        &self,
        b: &DMatrix<f64>,
        alpha: &DVector<f64>,
        idx: &[usize],
    ) -> (DMatrix<f64>, DVector<f64>) {
        let km1 = self.coef_classes();
        let mut g_b = DMatrix::zeros(self.data.dim(), km1);
        let mut g_alpha = DVector::zeros(km1);
        for &i in idx {
            let p = self.class_probabilities(b, alpha, i);
            let mut d_eta = p.rows(0, km1).into_owned();
            if self.data.y[i] < km1 {
                d_eta[self.data.y[i]] -= 1.0;
            }
            let xi = self.data.x.row(i).transpose();
            g_b.ger(1.0, &xi, &d_eta, 1.0);
            g_alpha += &d_eta;
        }
        let scale = 1.0 / idx.len().max(1) as f64;
        (g_b * scale, g_alpha * scale)
    }

    /// One model score for the curvature state: draw a data point
    /// uniformly, resample its label from the current model, and return
    /// the log-likelihood gradient of that resampled observation. The
    /// conditional mean over the resampled label is exactly zero.
    pub fn sampled_model_score(
        &self,
        b: &DMatrix<f64>,
        alpha: &DVector<f64>,
        rng: &mut dyn RngCore,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let i = rng.gen_range(0..self.data.n());
        let p = self.class_probabilities(b, alpha, i);
        let draw: f64 = rng.gen();
        let mut cum = 0.0;
        let mut label = self.data.n_classes - 1;
        for j in 0..self.data.n_classes {
            cum += p[j];
            if draw < cum {
                label = j;
                break;
            }
        }
        let km1 = self.coef_classes();
        let mut d_eta = -p.rows(0, km1).into_owned();
        if label < km1 {
            d_eta[label] += 1.0;
        }
        let xi = self.data.x.row(i).transpose();
        (&xi * d_eta.transpose(), d_eta)
    }
}

// ---------------------------------------------------------------------------
// Flow targets
// ---------------------------------------------------------------------------

/// An unnormalized target density on `ℝ^d` with gradient access.
pub trait FlowTarget {
    /// Ambient dimension.
    fn dim(&self) -> usize;
    /// Unnormalized log-density `log π̄(y)`.
    fn log_density(&self, y: &DVector<f64>) -> f64;
    /// Gradient `∇_y log π̄(y)`.
    fn grad(&self, y: &DVector<f64>) -> DVector<f64>;
}

/// Centered Gaussian-form target `log π̄ = −½ (y−c)ᵀ Q (y−c)` (no
/// normalizing constant).
#[derive(Debug, Clone)]
pub struct GaussianQuadTarget {
    /// Center `c`.
    pub center: DVector<f64>,
    /// SPD precision `Q`.
    pub precision: SymMatrix,
}

impl GaussianQuadTarget {
    /// Builds the target; the precision is trusted to be SPD.
    pub fn new(center: DVector<f64>, precision: SymMatrix) -> Self {
        Self { center, precision }
    }
}

impl FlowTarget for GaussianQuadTarget {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn log_density(&self, y: &DVector<f64>) -> f64 {
        let delta = y - &self.center;
        -0.5 * delta.dot(&(self.precision.matrix() * &delta))
    }

    fn grad(&self, y: &DVector<f64>) -> DVector<f64> {
        -(self.precision.matrix() * (y - &self.center))
    }
}

/// Two-layer Bayesian neural-network log posterior for binary
/// classification: `h = σ(Ax + a₀)`, `logit = vᵀh + v₀`, with an isotropic
/// `N(0, prior_var·I)` prior over all weights. Parameter layout:
/// `[vec A | a₀ | v | v₀]`.
#[derive(Debug, Clone)]
pub struct BnnTarget {
    x: DMatrix<f64>,
    y: DVector<f64>,
    hidden: usize,
    prior_var: f64,
}

impl BnnTarget {
    /// Builds the target.
    ///
    /// # Errors
    ///
    /// [`ObjectiveError::InvalidInput`] on malformed data or
    /// hyperparameters.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, hidden: usize, prior_var: f64) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || y.len() != x.nrows() {
            return Err(ObjectiveError::InvalidInput(
                "empty design or label length mismatch".into(),
            ));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ObjectiveError::InvalidInput(
                "labels must be 0 or 1".into(),
            ));
        }
        if hidden == 0 || !(prior_var > 0.0) {
            return Err(ObjectiveError::InvalidInput(
                "need hidden units and a positive prior variance".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            hidden,
            prior_var,
        })
    }

    /// Number of input features.
    pub fn features(&self) -> usize {
        self.x.ncols()
    }

    /// Hidden width.
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn unpack<'w>(
        &self,
        w: &'w DVector<f64>,
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
        let (h, p) = (self.hidden, self.features());
        let a = DMatrix::from_column_slice(h, p, w.rows(0, h * p).as_slice());
        let a0 = w.rows(h * p, h).into_owned();
        let v = w.rows(h * p + h, h).into_owned();
        let v0 = w[h * p + 2 * h];
        (a, a0, v, v0)
    }
}

impl FlowTarget for BnnTarget {
    fn dim(&self) -> usize {
        self.hidden * (self.features() + 2) + 1
    }

    fn log_density(&self, w: &DVector<f64>) -> f64 {
        let (a, a0, v, v0) = self.unpack(w);
        let n = self.x.nrows();
        let mut pre = &a * self.x.transpose(); // h×n
        for i in 0..n {
            pre.column_mut(i).add_assign(&a0);
        }
        let hid = pre.map(sigmoid);
        let mut ll = 0.0;
        for i in 0..n {
            let t = hid.column(i).dot(&v) + v0;
            // y log σ(t) + (1−y) log(1−σ(t)).
            ll += -softplus(-t) * self.y[i] - softplus(t) * (1.0 - self.y[i]);
        }
        let d = self.dim() as f64;
        ll - w.norm_squared() / (2.0 * self.prior_var)
            - 0.5 * d * (LN_2PI + self.prior_var.ln())
    }

    fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        let (a, a0, v, v0) = self.unpack(w);
        let (h, p, n) = (self.hidden, self.features(), self.x.nrows());
        let mut pre = &a * self.x.transpose();
        for i in 0..n {
            pre.column_mut(i).add_assign(&a0);
        }
        let hid = pre.map(sigmoid);
        let mut g_a = DMatrix::zeros(h, p);
        let mut g_a0 = DVector::zeros(h);
        let mut g_v = DVector::zeros(h);
        let mut g_v0 = 0.0;
        for i in 0..n {
            let hcol = hid.column(i).into_owned();
            let t = hcol.dot(&v) + v0;
            let dt = self.y[i] - sigmoid(t);
            g_v.axpy(dt, &hcol, 1.0);
            g_v0 += dt;
            // Backprop through the hidden layer.
            let da = DVector::from_fn(h, |j, _| dt * v[j] * hcol[j] * (1.0 - hcol[j]));
            let xi = self.x.row(i).transpose();
            g_a.ger(1.0, &da, &xi, 1.0);
            g_a0 += &da;
        }
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, h * p).copy_from_slice(g_a.as_slice());
        out.rows_mut(h * p, h).copy_from(&g_a0);
        out.rows_mut(h * p + h, h).copy_from(&g_v);
        out[h * p + 2 * h] = g_v0;
        out - w / self.prior_var
    }
}

// ---------------------------------------------------------------------------
// Orthogonal-layer normalizing flow
// ---------------------------------------------------------------------------

/// Parameter point of the flow: two square orthogonal layers and two bias
/// vectors, laid out as `[vec W₁ | vec W₂ | b₁ | b₂]` in chart coordinates.
pub type FlowPoint = (
    (DMatrix<f64>, DMatrix<f64>),
    (DVector<f64>, DVector<f64>),
);

/// Geometry of the flow parameters: a product of two orthogonal-matrix
/// factors and two Euclidean bias blocks.
pub type FlowManifold = crate::manifold::Product<
    crate::manifold::Product<crate::stiefel::Stiefel, crate::stiefel::Stiefel>,
    crate::manifold::Product<crate::manifold::Euclidean, crate::manifold::Euclidean>,
>;

/// Everything produced by one pass of the flow.
#[derive(Debug, Clone)]
pub struct FlowSample {
    /// Latent standard normal draw.
    pub eps: DVector<f64>,
    /// Pre-activation `a = W₁ε + b₁`.
    pub a: DVector<f64>,
    /// Activation `z = σ(a)`.
    pub z: DVector<f64>,
    /// Output `y = W₂z + b₂`.
    pub y: DVector<f64>,
}

/// Dense parameter derivatives of a flow functional.
#[derive(Debug, Clone)]
pub struct FlowGrads {
    /// Derivative with respect to the first layer.
    pub w1: DMatrix<f64>,
    /// Derivative with respect to the second layer.
    pub w2: DMatrix<f64>,
    /// Derivative with respect to the first bias.
    pub b1: DVector<f64>,
    /// Derivative with respect to the second bias.
    pub b2: DVector<f64>,
}

/// One-hidden-layer invertible sampler `y = W₂ σ(W₁ε + b₁) + b₂` with
/// square orthogonal `W₁, W₂`: the layer determinants drop out of the
/// log-density, and the flow inverts in closed form (transpose, logit,
/// transpose).
#[derive(Debug, Clone)]
pub struct SylvesterFlow {
    d: usize,
}

impl SylvesterFlow {
    /// Flow over `ℝ^d`.
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "flow dimension must be positive");
        Self { d }
    }

    /// Ambient dimension.
    pub fn dim_latent(&self) -> usize {
        self.d
    }

    /// Parameter manifold (two orthogonal layers, two Euclidean biases).
    pub fn manifold(&self) -> FlowManifold {
        crate::manifold::Product::new(
            crate::manifold::Product::new(
                crate::stiefel::Stiefel::new(self.d, self.d),
                crate::stiefel::Stiefel::new(self.d, self.d),
            ),
            crate::manifold::Product::new(
                crate::manifold::Euclidean::new(self.d),
                crate::manifold::Euclidean::new(self.d),
            ),
        )
    }

    /// Identity layers, zero biases.
    pub fn identity_point(&self) -> FlowPoint {
        (
            (
                DMatrix::identity(self.d, self.d),
                DMatrix::identity(self.d, self.d),
            ),
            (DVector::zeros(self.d), DVector::zeros(self.d)),
        )
    }

    /// Deterministic forward pass from a given latent draw.
    pub fn forward(&self, p: &FlowPoint, eps: DVector<f64>) -> FlowSample {
        let ((w1, w2), (b1, b2)) = p;
        let a = w1 * &eps + b1;
        let z = a.map(sigmoid);
        let y = w2 * &z + b2;
        FlowSample { eps, a, z, y }
    }

    /// Samples the flow.
    pub fn sample(&self, p: &FlowPoint, rng: &mut dyn RngCore) -> FlowSample {
        let eps = DVector::from_fn(self.d, |_, _| StandardNormal.sample(rng));
        self.forward(p, eps)
    }

    /// Log-density of the flow at its own sample:
    /// `log q(y) = log φ(ε) − Σᵢ log σ'(aᵢ)`.
    pub fn log_q(&self, s: &FlowSample) -> f64 {
        let mut out = -0.5 * (self.d as f64 * LN_2PI + s.eps.norm_squared());
        for i in 0..self.d {
            out -= log_sigmoid_deriv(s.a[i]);
        }
        out
    }

    /// Closed-form inverse pass: recovers the latent draw behind `y`.
    ///
    /// # Errors
    ///
    /// [`ObjectiveError::InvalidInput`] when `y` is outside the flow's
    /// range (the intermediate activation must land strictly inside
    /// `(0, 1)` componentwise).
    pub fn inverse(&self, p: &FlowPoint, y: &DVector<f64>) -> Result<FlowSample> {
        let ((w1, w2), (b1, b2)) = p;
        let z = w2.transpose() * (y - b2);
        if z.iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(ObjectiveError::InvalidInput(
                "point is outside the flow's range".into(),
            ));
        }
        let a = z.map(|v| (v / (1.0 - v)).ln());
        let eps = w1.transpose() * (&a - b1);
        Ok(FlowSample {
            eps,
            a,
            z,
            y: y.clone(),
        })
    }

    /// Parameter score `∇_θ log q_θ(y)` at the sampled point, holding `y`
    /// fixed, as dense derivatives. The orthogonal-layer determinant terms
    /// are omitted — their gradients are normal to the orthogonal-matrix
    /// tangent spaces, so they vanish under the chart projection.
    pub fn score_ambient(&self, p: &FlowPoint, s: &FlowSample) -> FlowGrads {
        let ((_, w2), (_, b2)) = p;
        let w1e = &s.a - &p.1 .0; // W₁ε = a − b₁
        let one_minus_2z = s.z.map(|z| 1.0 - 2.0 * z);
        let c = -&w1e - &one_minus_2z;
        let c_tilde = DVector::from_fn(self.d, |i, _| c[i] / (s.z[i] * (1.0 - s.z[i])));
        let r = &s.y - b2;
        FlowGrads {
            w1: -(&w1e * s.eps.transpose()),
            w2: &r * c_tilde.transpose(),
            b1: w1e,
            b2: -(w2 * &c_tilde),
        }
    }

    /// One-sample objective value and pathwise gradient of the negative
    /// evidence lower bound against a target: value
    /// `log q(y) − log π̄(y)`, gradient through the fixed latent draw (the
    /// latent normal density does not depend on the parameters).
    pub fn nelbo_sample_grad<T: FlowTarget + ?Sized>(
        &self,
        p: &FlowPoint,
        s: &FlowSample,
        target: &T,
    ) -> (f64, FlowGrads) {
        let ((_, w2), _) = p;
        let value = self.log_q(s) - target.log_density(&s.y);
        let g_y = target.grad(&s.y);
        let sig_prime = DVector::from_fn(self.d, |i, _| s.z[i] * (1.0 - s.z[i]));
        let mut g_a = (w2.transpose() * &g_y).component_mul(&sig_prime);
        for i in 0..self.d {
            g_a[i] += 1.0 - 2.0 * s.z[i];
        }
        // The lower-bound gradient, negated for the minimized objective.
        (
            value,
            FlowGrads {
                w1: -(&g_a * s.eps.transpose()),
                w2: -(&g_y * s.z.transpose()),
                b1: -g_a,
                b2: -g_y,
            },
        )
    }

    /// Packs dense derivatives into the ambient coordinate layout
    /// `[vec W₁ | vec W₂ | b₁ | b₂]` for chart projection.
    pub fn pack_ambient(&self, g: &FlowGrads) -> DVector<f64> {
        let d2 = self.d * self.d;
        let mut out = DVector::zeros(2 * d2 + 2 * self.d);
        out.rows_mut(0, d2).copy_from_slice(g.w1.as_slice());
        out.rows_mut(d2, d2).copy_from_slice(g.w2.as_slice());
        out.rows_mut(2 * d2, self.d).copy_from(&g.b1);
        out.rows_mut(2 * d2 + self.d, self.d).copy_from(&g.b2);
        out
    }
}
