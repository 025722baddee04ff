//! Penalized EM estimation of finite mixtures of normal panel regressions and
//! tests for the number of mixture components.

pub mod asymdist;
pub mod dgp;
pub mod em;
pub mod error;
pub mod linalg;
pub mod model;
pub mod penalty;
pub mod rng;
pub mod scores;
pub mod sht;
pub mod testing;

pub use error::{Error, Result};
pub use model::{canonicalize, component_loglik, mixture_loglik, ComponentParams, MixtureParams, PanelDataset};
