//! Data-generating processes with counterfactual ground truth.

pub mod basis;
pub mod covariates;
pub mod nsclc;
pub mod rng;
pub mod semisynth;
