//! Rating-transition credit-risk models.
//!
//! - [`numerics`]: standard-normal kernel and scalar minimization
//! - [`domain`]: rating scales, cohort observations, panels and macro series
//! - [`onefactor`]: the one-factor credit-cycle model
//! - [`macrorisk`]: probit regression of tail transition rates on macro variables
//! - [`simlab`]: simulation study comparing the two PD estimators

pub mod domain;
pub mod numerics;
pub mod macrorisk;
pub mod onefactor;
pub mod simlab;
