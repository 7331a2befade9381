//! Simulation and verification toolkit for regime-switching diffusion
//! processes whose switching component is driven by a Poisson random measure
//! through interval layouts on the real line.
//!
//! The crate provides four layers:
//!
//! * [`ratemat`] — generator (Q-matrix) data types, envelope matrices for
//!   state-dependent rates, invariant measures, semigroups and product-space
//!   coupling generators;
//! * [`layout`] + [`clocks`] — the three interval layouts (classical,
//!   comparison-signed, block) and the reproducible Poisson event streams
//!   that drive them;
//! * [`sim`] + [`estimators`] — exact event-driven simulation of single
//!   chains, order-coupled comparison bundles and perturbation pairs, with
//!   Monte Carlo estimators and an exact generator-based oracle for the
//!   disagreement functional;
//! * [`bounds`] — closed-form perturbation and stability bounds evaluated
//!   next to the measured quantities.
//!
//! The `switchbound` binary runs scenario configs end to end; see the
//! repository README and `docs/formats.md` for the file formats.

pub mod bounds;
pub mod clocks;
pub mod estimators;
pub mod layout;
pub mod ratemat;
pub mod scenario;
pub mod sim;
