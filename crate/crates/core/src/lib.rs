//! Kinesthetic-visuospatial locomotion stack for a simplified quadruped.

pub mod estimator;
pub mod harness;
pub mod netcore;
pub mod obs;
pub mod rl;
pub mod simcore;
pub mod terrain;
