//! Probabilistic wind power forecasting with latent Gaussian models.
//!
//! Three models share one representation: a sparse Gaussian prior over a
//! stacked latent vector observed through a sparse projector with Gaussian
//! noise on the logit scale. Hyperparameters are fitted by maximizing the
//! exact marginal posterior; forecasts are joint predictive samples across
//! farms and lead times.

pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod inference;
pub mod model;
pub mod optim;
pub mod par;
pub mod spde;
pub mod transform;

pub use error::{Error, Result};
