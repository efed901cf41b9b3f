//! Particle simulation and verification for partially observed mean-field
//! control with a hidden Markov regime.

pub mod hjb;
pub mod measures;
pub mod model;
pub mod optimize;
pub mod rng;
pub mod sim;
