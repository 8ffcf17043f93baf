//! Recanting-twin path-specific effects of a binary exposure through a
//! recanting intermediate confounder `Z` and a mediator `M` on an outcome
//! `Y`: identification formulas, cross-fitted one-step estimation with
//! influence-function inference, and a simulation study with ground-truth
//! oracles.

pub mod data;
pub mod error;
pub mod estimator;
pub mod identification;
pub mod nuisance;
pub mod simulation;

pub use data::Dataset;
pub use error::{Error, Result};
pub use estimator::{estimate, EffectEstimates, EstimatorConfig, Inference};
pub use identification::{PathEffects, PathId, RefLevels, TargetId, ThetaSet};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
