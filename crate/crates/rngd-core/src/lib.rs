//! Inversion-free Riemannian natural-gradient descent (IF-RNGD).
//!
//! This crate implements a stochastic natural-gradient optimizer that never
//! inverts a Fisher matrix directly: it maintains the *inverse* Fisher
//! operator through rank-one Sherman–Morrison updates driven by model score
//! vectors, transports that operator along the optimization path, and applies
//! it to minibatch gradients before retracting on the manifold.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: symmetric eigendecomposition, Lyapunov solves, matrix square
//!   roots, geometric means, and truncated SVD — the dense kernels everything
//!   else is built on.
//! - [`manifold`]: the [`manifold::Manifold`] trait (chart-coordinate tangent
//!   vectors, retraction, vector transport and its metric adjoint), the
//!   Euclidean backend, product manifolds, and finite-difference geometry
//!   diagnostics.
//! - [`bw`]: Gaussian distributions under the Bures–Wasserstein geometry
//!   (optimal-transport metric on means and covariances).
//! - [`stiefel`]: orthonormal-frame manifold with Cayley retraction and
//!   isometric Cayley transport.
//! - [`fixedrank`]: fixed-rank matrices in factored SVD form with projective
//!   retraction and transport.
//! - [`fisher`]: dense and sliding-window inverse-Fisher states with
//!   Sherman–Morrison score updates, path transport, and binary checkpoints.
//! - [`objectives`]: variational-Bayes logistic regression, reduced-rank
//!   multinomial regression, and a Sylvester normalizing flow over a Bayesian
//!   neural-network posterior.
//! - [`optimizer`]: the IF-RNGD loop plus Riemannian SGD, exact Gaussian NGD,
//!   and an extrinsic (ambient-space) baseline, with deterministic seeded
//!   runs and trace recording.
//!
//! All dense work is on `f64` via [`nalgebra`] (column-major storage).
//! Randomness flows through explicit [`rand::RngCore`] handles; every run is
//! reproducible from its seed.

pub mod bw;
pub mod fisher;
pub mod fixedrank;
pub mod linalg;
pub mod manifold;
pub mod objectives;
pub mod optimizer;
pub mod stiefel;

pub use linalg::{LinalgError, SymMatrix};
pub use manifold::{GeometryError, Manifold};
