//! Model-based sparse coding: mixture-of-supports dictionary learning for
//! Gaussian, spatially correlated Gaussian and exponential-family data.
pub mod baseline;
pub mod bench;
pub mod em;
pub mod error;
pub mod expfam;
pub mod gaussian;
pub mod io;
mod linalg;
pub mod model;
pub mod patches;
pub mod spatial;
pub mod synth;

pub use em::{fit_msc, FitConfig, FitResult, RcSchedule};
pub use error::{MscError, Result};
pub use model::{DataKind, Dataset, Dictionary, MixtureState, ModelFamily, SupportMask, SupportSet};
