//! Multi-line claims reserving with evolving GLM factors.
//!
//! The model treats a portfolio of loss triangles as a multivariate time series
//! indexed by accident year. Cell means follow a log-linked Hoerl curve whose
//! factors drift as random walks, plus a calendar-year level shared within each
//! diagonal; calendar levels across lines are coupled through a common shock.
//! Observations are Tweedie (compound Poisson-gamma in the interesting range)
//! or Gaussian.
//!
//! Estimation is adaptive: a particle filter with parameter learning for the
//! general case ([`particle`]), and a dual/joint Kalman filter with exact
//! likelihood and numerical MLE for the Gaussian case ([`kalman`]). Supporting
//! machinery: triangle data handling ([`triangle`]), Tweedie densities and
//! samplers ([`tweedie`]), static GLM fits for initialization and exploratory
//! analysis ([`glm`]), a panel simulator ([`sim`]), reserve forecasting with
//! risk margins ([`forecast`]), and fit diagnostics ([`diagnostics`]).

pub mod diagnostics;
pub mod error;
pub mod forecast;
pub mod glm;
pub mod kalman;
mod optim;
pub mod particle;
pub mod rng;
pub mod sim;
pub mod state_space;
pub mod triangle;
pub mod tweedie;

pub use error::{Error, Result};
pub use state_space::{FactorState, LineParams, ModelParams, ObservationFamily};
pub use triangle::{calendar_index, IngestConfig, Kind, Scale, TrianglePanel};
pub use tweedie::TweedieSpec;
