//! Branching random walks in a time-random environment.
//!
//! The crate covers the environment model, the analytic rate functions,
//! a keyed-RNG simulator, empirical estimators and a verification harness
//! that checks the limit theorems against simulation.

pub mod analytic;
pub mod cli;
pub mod config;
pub mod env_model;
pub mod estimators;
pub mod io;
pub mod numeric;
pub mod rng;
pub mod simulate;
pub mod verify;
