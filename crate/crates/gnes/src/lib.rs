//! Distributed generalized Nash equilibrium (GNE) seeking for monotone games
//! with affine coupling constraints.
//!
//! The library provides:
//! - [`graph`]: communication graphs with incidence, Laplacian and edge
//!   Laplacian matrices;
//! - [`game`]: game descriptions (gradient oracles, box constraints, coupling
//!   blocks) and a task-allocation benchmark generator;
//! - [`operators`]: the preconditioned forward-backward splitting machinery,
//!   step-size validation and selection matrices;
//! - [`solvers`]: synchronous, randomized block-coordinate and asynchronous
//!   (bounded-delay) iterations, in full and partial decision information
//!   modes, plus a threaded execution harness;
//! - [`metrics`]: KKT residuals, consensus errors and trajectory recording;
//! - [`config`]: experiment configuration shared with the CLI.

pub mod config;
pub mod game;
pub mod graph;
pub mod metrics;
pub mod operators;
pub mod solvers;
