//! Perturbation-based explanations for image classifiers.
//!
//! * [`model`]: scorer abstraction, a small trainable CNN with exact input
//!   gradients, a synthetic corpus and blurred baselines.
//! * [`perturbation`]: masks, patch grids and `Φ(I, M)`.
//! * [`metrics`]: deletion/insertion curves and their AUC.
//! * [`optimizer`]: integrated-gradient mask optimization (I-GOS and iGOS++).
//! * [`sag`]: beam search for minimal sufficient explanations and structured
//!   attention graphs.
//! * [`xnn`]: the SRAE explanation-network objective and its metrics.

pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod perturbation;
pub mod sag;
pub mod xnn;

pub use error::{Error, Result};
pub use image::{Image, Shape};
