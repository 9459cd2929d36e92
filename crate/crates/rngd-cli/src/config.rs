//! Experiment specifications.
//!
//! One JSON spec per file. Every field beyond the experiment tag and the
//! output directory has a default; [`ExperimentSpec::resolve`] applies
//! them and validates, and the runner echoes the fully resolved spec into
//! the output directory as `resolved-config.json` so a run can always be
//! reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticKind;
use crate::CliError;
use rngd_core::optimizer::{CurvatureSpec, RunConfig, StepSchedule};

/// Experiment families the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Gaussian variational inference for logistic regression; methods
    /// are chart × update-rule cells like `bw-ngd-approx`.
    VbLogistic,
    /// Reduced-rank multinomial regression; methods `if-rngd`,
    /// `extrinsic-if-ngd`, `rsgd`.
    ReducedRank,
    /// Orthogonal-layer flow fit to a Bayesian-network posterior over a
    /// small regression net; methods `if-rngd`, `rsgd`.
    FlowBnn,
    /// Strongly convex Euclidean reference instance with an exact-score
    /// family; methods `if-rngd`, `rsgd`. Traces carry a `ref_dist`
    /// column with the distance to the known minimizer.
    Quadratic,
}

impl ExperimentKind {
    fn default_methods(self) -> Vec<String> {
        let m: &[&str] = match self {
            ExperimentKind::VbLogistic => &[
                "euc-gd",
                "euc-ngd",
                "euc-ngd-approx",
                "bw-gd",
                "bw-ngd",
                "bw-ngd-approx",
            ],
            ExperimentKind::ReducedRank => &["if-rngd", "extrinsic-if-ngd", "rsgd"],
            ExperimentKind::FlowBnn => &["if-rngd", "rsgd"],
            ExperimentKind::Quadratic => &["if-rngd"],
        };
        m.iter().map(|s| s.to_string()).collect()
    }

    /// Method tags this experiment accepts.
    pub fn known_methods(self) -> Vec<String> {
        match self {
            ExperimentKind::ReducedRank => ["if-rngd", "extrinsic-if-ngd", "rsgd"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ExperimentKind::FlowBnn | ExperimentKind::Quadratic => ["if-rngd", "rsgd"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ExperimentKind::VbLogistic => self.default_methods(),
        }
    }
}

/// Curvature-state tag in specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureTag {
    /// No state.
    None,
    /// Dense block-diagonal state.
    Dense,
    /// Sliding window with the given capacity.
    Window {
        /// Window capacity.
        cap: usize,
    },
}

impl From<CurvatureTag> for CurvatureSpec {
    fn from(tag: CurvatureTag) -> Self {
        match tag {
            CurvatureTag::None => CurvatureSpec::None,
            CurvatureTag::Dense => CurvatureSpec::Dense,
            CurvatureTag::Window { cap } => CurvatureSpec::Window { cap },
        }
    }
}

/// Variational gradient-estimator tag in specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorTag {
    /// Curvature-form estimator (second-derivative identity).
    CurvatureForm,
    /// Reparameterization estimator.
    Reparam,
    /// Score-function estimator.
    ScoreFunction {
        /// Subtract a batch-mean baseline.
        control_variate: bool,
    },
}

impl From<EstimatorTag> for rngd_core::objectives::VbEstimator {
    fn from(tag: EstimatorTag) -> Self {
        use rngd_core::objectives::VbEstimator as E;
        match tag {
            EstimatorTag::CurvatureForm => E::CurvatureForm,
            EstimatorTag::Reparam => E::Reparam,
            EstimatorTag::ScoreFunction { control_variate } => E::ScoreFunction { control_variate },
        }
    }
}

/// Optimizer section of a spec; every field optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Optimization steps.
    #[serde(default)]
    pub iters: Option<usize>,
    /// Step-size scale `c₀`.
    #[serde(default)]
    pub c0: Option<f64>,
    /// Step-size offset `c₁`.
    #[serde(default)]
    pub c1: Option<f64>,
    /// Step-size decay exponent `α ∈ (½, 1)`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Curvature ridge `ε`.
    #[serde(default)]
    pub eps: Option<f64>,
    /// Curvature-state shape.
    #[serde(default)]
    pub curvature: Option<CurvatureTag>,
    /// Scores folded into the state per iteration.
    #[serde(default)]
    pub scores_per_iter: Option<usize>,
    /// Trace cadence (0 = final row only).
    #[serde(default)]
    pub record_every: Option<usize>,
    /// Seed of the common-random-number objective evaluator.
    #[serde(default)]
    pub eval_seed: Option<u64>,
    /// Step halvings allowed before a failing retraction aborts.
    #[serde(default)]
    pub max_halvings: Option<u32>,
    /// Write measured wall time into traces. Off by default so that
    /// re-running a spec reproduces its trace files byte for byte; when
    /// off the `wall_ms` column is written as 0.
    #[serde(default)]
    pub record_timing: Option<bool>,
}

/// Synthetic-generator section of a spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SyntheticSection {
    /// Generator kind: `logistic` or `multiclass-lowrank`.
    pub kind: String,
    /// Rows.
    #[serde(default)]
    pub n: Option<usize>,
    /// Features.
    #[serde(default)]
    pub d: Option<usize>,
    /// Classes (multiclass only).
    #[serde(default)]
    pub k: Option<usize>,
    /// Planted rank (multiclass only).
    #[serde(default)]
    pub r: Option<usize>,
    /// True coefficients (logistic only); drawn from the data seed when
    /// absent.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    /// Generator seed; defaults to the spec seed.
    #[serde(default)]
    pub data_seed: Option<u64>,
}

/// Data source section: either a file reference or generator parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Path to a data file (LIBSVM, CSV, or IDX images).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// File format: `libsvm`, `csv`, or `idx`. Inferred from the
    /// extension when absent.
    #[serde(default)]
    pub format: Option<String>,
    /// CSV label column (default 0).
    #[serde(default)]
    pub label_column: Option<usize>,
    /// CSV header flag (default true).
    #[serde(default)]
    pub has_header: Option<bool>,
    /// IDX labels file (required with `format = "idx"`).
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    /// Row cap for IDX ingestion (desk scale).
    #[serde(default)]
    pub limit: Option<usize>,
    /// LIBSVM feature-dimension override.
    #[serde(default)]
    pub dim_override: Option<usize>,
    /// Synthetic generator parameters (used when `path` is absent).
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    /// Standardize features with ingestion statistics (default true).
    #[serde(default)]
    pub standardize: Option<bool>,
}

/// One experiment: an objective tag, a data source, methods to compare,
/// optimizer settings, replication count, and an output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Experiment family.
    pub experiment: ExperimentKind,
    /// Data source; a per-experiment synthetic default applies when
    /// absent.
    #[serde(default)]
    pub dataset: Option<DataSection>,
    /// Methods to run; the experiment's full method set when absent.
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    /// Optimizer settings.
    #[serde(default)]
    pub run: RunSection,
    /// Gradient minibatch size.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Monte Carlo batch for objective evaluation in traces.
    #[serde(default)]
    pub eval_batch: Option<usize>,
    /// Gaussian prior variance σ² (variational experiments).
    #[serde(default)]
    pub prior_var: Option<f64>,
    /// Variational gradient estimator.
    #[serde(default)]
    pub estimator: Option<EstimatorTag>,
    /// Coefficient rank (reduced-rank experiment).
    #[serde(default)]
    pub rank: Option<usize>,
    /// Hidden units (flow experiment's regression net).
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Parameter dimension (quadratic experiment).
    #[serde(default)]
    pub dim: Option<usize>,
    /// Base seed; replication `r` runs on stream `r` of this seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Independent replications (≥ 1), each on its own RNG stream.
    #[serde(default)]
    pub replications: Option<usize>,
    /// Artifact directory.
    pub out_dir: PathBuf,
}

/// A spec with every default applied; serialized as
/// `resolved-config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedSpec {
    /// Experiment family.
    pub experiment: ExperimentKind,
    /// Data source with defaults applied.
    pub dataset: DataSection,
    /// Methods to run.
    pub methods: Vec<String>,
    /// Optimizer settings, all concrete.
    pub run: ResolvedRun,
    /// Gradient minibatch size.
    pub batch: usize,
    /// Objective-evaluation batch size.
    pub eval_batch: usize,
    /// Prior variance.
    pub prior_var: f64,
    /// Variational gradient estimator.
    pub estimator: EstimatorTag,
    /// Coefficient rank.
    pub rank: usize,
    /// Hidden units.
    pub hidden: usize,
    /// Parameter dimension (quadratic).
    pub dim: usize,
    /// Base seed.
    pub seed: u64,
    /// Replications.
    pub replications: usize,
    /// Artifact directory.
    pub out_dir: PathBuf,
}

/// Optimizer settings with defaults applied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRun {
    /// Optimization steps.
    pub iters: usize,
    /// Step-size scale.
    pub c0: f64,
    /// Step-size offset.
    pub c1: f64,
    /// Step-size decay exponent.
    pub alpha: f64,
    /// Curvature ridge.
    pub eps: f64,
    /// Curvature-state shape.
    pub curvature: CurvatureTag,
    /// Scores per iteration.
    pub scores_per_iter: usize,
    /// Trace cadence.
    pub record_every: usize,
    /// Objective-evaluation seed.
    pub eval_seed: u64,
    /// Step-halving budget.
    pub max_halvings: u32,
    /// Whether traces carry measured wall time.
    pub record_timing: bool,
}

impl ResolvedRun {
    /// Core run configuration for one replication.
    ///
    /// # Errors
    ///
    /// [`CliError::Config`] when the step schedule is out of range.
    pub fn to_run_config(&self, seed: u64, stream: u64) -> Result<RunConfig, CliError> {
        let schedule = StepSchedule::new(self.c0, self.c1, self.alpha)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(RunConfig {
            iters: self.iters,
            schedule,
            eps: self.eps,
            curvature: self.curvature.into(),
            scores_per_iter: self.scores_per_iter,
            seed,
            stream,
            record_every: self.record_every,
            eval_seed: self.eval_seed,
            max_halvings: self.max_halvings,
            record_events: false,
        })
    }
}

impl ExperimentSpec {
    /// Applies defaults and validates.
    ///
    /// # Errors
    ///
    /// [`CliError::Config`] on zero replications, unknown or
    /// inappropriate method tags, or malformed synthetic parameters.
    pub fn resolve(&self) -> Result<ResolvedSpec, CliError> {
        let kind = self.experiment;
        let methods = match &self.methods {
            Some(m) if m.is_empty() => {
                return Err(CliError::Config("methods list is empty".into()))
            }
            Some(m) => m.clone(),
            None => kind.default_methods(),
        };
        let known = kind.known_methods();
        for m in &methods {
            if !known.contains(m) {
                return Err(CliError::Config(format!(
                    "unknown method {m:?} for this experiment; expected one of {known:?}"
                )));
            }
        }
        let replications = self.replications.unwrap_or(1);
        if replications == 0 {
            return Err(CliError::Config("replications must be at least 1".into()));
        }
        let default_curvature = match kind {
            ExperimentKind::VbLogistic | ExperimentKind::Quadratic => CurvatureTag::Dense,
            ExperimentKind::ReducedRank | ExperimentKind::FlowBnn => {
                CurvatureTag::Window { cap: 50 }
            }
        };
        let run = ResolvedRun {
            iters: self.run.iters.unwrap_or(1000),
            c0: self.run.c0.unwrap_or(1.0),
            c1: self.run.c1.unwrap_or(100.0),
            alpha: self.run.alpha.unwrap_or(0.75),
            eps: self.run.eps.unwrap_or(1.0),
            curvature: self.run.curvature.unwrap_or(default_curvature),
            scores_per_iter: self.run.scores_per_iter.unwrap_or(1),
            record_every: self.run.record_every.unwrap_or(100),
            eval_seed: self.run.eval_seed.unwrap_or(0x5EED),
            max_halvings: self.run.max_halvings.unwrap_or(30),
            record_timing: self.run.record_timing.unwrap_or(false),
        };
        StepSchedule::new(run.c0, run.c1, run.alpha)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let needs_state = methods.iter().any(|m| m.ends_with("approx") || m == "if-rngd" || m == "extrinsic-if-ngd");
        if needs_state && run.curvature == CurvatureTag::None {
            return Err(CliError::Config(
                "the requested methods need a curvature state; set run.curvature".into(),
            ));
        }
        let seed = self.seed.unwrap_or(1);
        let mut dataset = self.dataset.clone().unwrap_or_default();
        if dataset.path.is_none()
            && dataset.synthetic.is_none()
            && kind != ExperimentKind::Quadratic
        {
            dataset.synthetic = Some(default_synthetic(kind));
        }
        if let Some(synthetic) = dataset.synthetic.as_mut() {
            // Echo the generator parameters fully so the resolved config
            // reproduces the dataset on its own.
            match synthetic.to_kind()? {
                SyntheticKind::Logistic { n, d, .. } => {
                    synthetic.n = Some(n);
                    synthetic.d = Some(d);
                }
                SyntheticKind::MulticlassLowRank { n, d, k, r } => {
                    synthetic.n = Some(n);
                    synthetic.d = Some(d);
                    synthetic.k = Some(k);
                    synthetic.r = Some(r);
                }
            }
            synthetic.data_seed.get_or_insert(seed);
        }
        if dataset.standardize.is_none() {
            dataset.standardize = Some(true);
        }
        let (default_batch, default_eval) = match kind {
            ExperimentKind::VbLogistic => (100, 1000),
            ExperimentKind::ReducedRank => (128, 0),
            ExperimentKind::FlowBnn => (8, 256),
            ExperimentKind::Quadratic => (8, 0),
        };
        Ok(ResolvedSpec {
            experiment: kind,
            dataset,
            methods,
            run,
            batch: self.batch.unwrap_or(default_batch),
            eval_batch: self.eval_batch.unwrap_or(default_eval),
            prior_var: self.prior_var.unwrap_or(25.0),
            estimator: self.estimator.unwrap_or(EstimatorTag::CurvatureForm),
            rank: self.rank.unwrap_or(2),
            hidden: self.hidden.unwrap_or(8),
            dim: self.dim.unwrap_or(10),
            seed,
            replications,
            out_dir: self.out_dir.clone(),
        })
    }
}

fn default_synthetic(kind: ExperimentKind) -> SyntheticSection {
    let (gen_kind, n, d, k, r) = match kind {
        ExperimentKind::VbLogistic => ("logistic", 500, 20, 0, 0),
        ExperimentKind::ReducedRank => ("multiclass-lowrank", 10_000, 20, 6, 2),
        ExperimentKind::FlowBnn => ("logistic", 200, 5, 0, 0),
        // The quadratic instance is generated from the spec seed directly.
        ExperimentKind::Quadratic => unreachable!("quadratic runs have no dataset"),
    };
    SyntheticSection {
        kind: gen_kind.into(),
        n: Some(n),
        d: Some(d),
        k: (k > 0).then_some(k),
        r: (r > 0).then_some(r),
        beta: None,
        data_seed: None,
    }
}

impl SyntheticSection {
    /// Generator parameters with defaults applied.
    ///
    /// # Errors
    ///
    /// [`CliError::Config`] on an unknown kind tag.
    pub fn to_kind(&self) -> Result<SyntheticKind, CliError> {
        match self.kind.as_str() {
            "logistic" => Ok(SyntheticKind::Logistic {
                n: self.n.unwrap_or(500),
                d: self.d.unwrap_or(20),
                beta: self.beta.clone(),
            }),
            "multiclass-lowrank" => Ok(SyntheticKind::MulticlassLowRank {
                n: self.n.unwrap_or(10_000),
                d: self.d.unwrap_or(20),
                k: self.k.unwrap_or(6),
                r: self.r.unwrap_or(2),
            }),
            other => Err(CliError::Config(format!(
                "unknown synthetic kind {other:?}; expected \"logistic\" or \"multiclass-lowrank\""
            ))),
        }
    }
}

/// Parameter grid for sweeps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Step-size scales to try; log-spaced `1e-3..1e0` when absent.
    #[serde(default)]
    pub c0: Option<Vec<f64>>,
    /// Decay exponents to try; `{0.6, 0.75, 0.9}` when absent.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

/// A sweep: a base experiment plus a `(c₀, α)` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Base experiment; each grid cell overrides its `run.c0`/`run.alpha`.
    pub base: ExperimentSpec,
    /// Grid; defaults apply when absent.
    #[serde(default)]
    pub grid: GridSection,
}

/// Grid with defaults applied, echoed into sweep output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedGrid {
    /// Step-size scales.
    pub c0: Vec<f64>,
    /// Decay exponents.
    pub alpha: Vec<f64>,
}

impl GridSection {
    /// Applies the default grid.
    pub fn resolve(&self) -> ResolvedGrid {
        ResolvedGrid {
            c0: self
                .c0
                .clone()
                .unwrap_or_else(|| vec![1e-3, 1e-2, 1e-1, 1e0]),
            alpha: self.alpha.clone().unwrap_or_else(|| vec![0.6, 0.75, 0.9]),
        }
    }
}

/// Reads and deserializes a JSON spec file.
///
/// # Errors
///
/// [`CliError::Config`] on unreadable or invalid JSON (unknown fields
/// included), tagged with the path.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_resolves_with_every_default_populated() {
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{ "experiment": "vb-logistic", "out_dir": "/tmp/x" }"#,
        )
        .unwrap();
        let resolved = spec.resolve().unwrap();
        assert_eq!(resolved.methods.len(), 6);
        assert_eq!(resolved.run.iters, 1000);
        assert_eq!(resolved.run.c0, 1.0);
        assert_eq!(resolved.replications, 1);
        assert!(resolved.dataset.synthetic.is_some());
        assert_eq!(resolved.dataset.standardize, Some(true));
        // The resolved form serializes without any nulls in run settings.
        let echo = serde_json::to_value(&resolved).unwrap();
        assert!(echo["run"]["iters"].is_u64());
        assert!(echo["run"]["curvature"].is_string());
    }

    #[test]
    fn unknown_fields_and_methods_are_config_errors() {
        let bad: Result<ExperimentSpec, _> = serde_json::from_str(
            r#"{ "experiment": "vb-logistic", "out_dir": "/tmp/x", "learning_rate": 3 }"#,
        );
        assert!(bad.is_err());
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{ "experiment": "reduced-rank", "methods": ["newton"], "out_dir": "/tmp/x" }"#,
        )
        .unwrap();
        assert!(matches!(spec.resolve(), Err(CliError::Config(_))));
    }

    #[test]
    fn zero_replications_are_rejected() {
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{ "experiment": "quadratic", "replications": 0, "out_dir": "/tmp/x" }"#,
        )
        .unwrap();
        assert!(matches!(spec.resolve(), Err(CliError::Config(_))));
    }

    #[test]
    fn default_sweep_grid_is_log_spaced_scales_and_three_exponents() {
        let grid = GridSection::default().resolve();
        assert_eq!(grid.c0, vec![1e-3, 1e-2, 1e-1, 1e0]);
        assert_eq!(grid.alpha, vec![0.6, 0.75, 0.9]);
    }
}
