//! Inducing Gaussian process networks.
//!
//! A neural feature map embeds inputs into `R^d`; a set of inducing points
//! lives directly in that feature space together with an affine
//! pseudo-label head. Feature map, inducing points, head, kernel bandwidth
//! and observation noise are learned jointly by mini-batch gradient descent
//! on the marginal likelihood (Laplace-approximated for probit
//! classification).

pub mod autodiff;
pub mod error;
pub mod linalg;

pub use error::{IgnError, Result};
pub mod kernels;
pub mod model;
pub mod rng;
pub mod regression;
pub mod classification;
pub mod datasets;
pub mod metrics;
pub mod persist;
pub mod trainer;
