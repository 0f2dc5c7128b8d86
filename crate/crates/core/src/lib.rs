//! Numerical laboratory for mean-field backward SDEs driven by a common
//! noise.
//!
//! The crate simulates three coupled objects on shared Brownian randomness:
//! the limit equation whose driver reads the conditional law of its own
//! solution, the `n`-particle interacting system whose driver reads the
//! live empirical measure, and the coupled system that shares the particle
//! Brownian motions but reads the frozen limit law. On top of the solvers
//! sits an experiment harness measuring empirical convergence rates in
//! Wasserstein distance, coupling-error ratios, pathwise domination checks,
//! and moment/increment scalings.
//!
//! Everything is deterministic in `(configuration, seed)`.
//!
//! ```
//! use mfbsde::backward::SchemeConfig;
//! use mfbsde::model::ModelSpec;
//! use mfbsde::particle::solve_particle_system;
//! use mfbsde::paths::{PathBundle, TimeGrid};
//!
//! let grid = TimeGrid::new(1.0, 10)?;
//! let bundle = PathBundle::sample(&grid, 32, 4, 1, 7)?;
//! let model = ModelSpec::linear_mean(0.5, 1.0, 1);
//! let solution = solve_particle_system(&model, &bundle, &SchemeConfig::default())?;
//! // The terminal values equal the terminal map; earlier nodes come from
//! // the regression recursion.
//! assert_eq!(solution.num_particles(), 32);
//! assert!(solution.y(0, 0, 0)[0].is_finite());
//! # Ok::<(), mfbsde::Error>(())
//! ```

pub mod backward;
pub mod config;
pub mod error;
pub mod experiments;
pub mod limit;
pub mod measures;
pub mod model;
pub mod particle;
pub mod paths;
pub mod regression;
pub mod report;
pub mod runner;
pub mod validate;

pub use error::{Error, Result};
