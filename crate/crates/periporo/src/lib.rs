//! Meshfree simulator for coupled large-deformation dynamics, unsaturated flow
//! and fracture in porous media.
//!
//! Every material point carries a displacement and a pore water pressure.
//! Internal forces and fluxes are nonlocal: they are sums over the point's
//! family (all neighbours inside the horizon in the current configuration),
//! obtained from classical constitutive laws through the correspondence
//! principle and stabilized against zero-energy modes with residual states.
//! Time integration is a two-stage fractional step: undrained deformation
//! first, then flow in the updated configuration.

pub mod constitutive;
pub mod discretization;
pub mod error;
pub mod fracture;
pub mod io;
pub mod kinematics;
pub mod model;
pub mod solver;
pub mod states;

pub use error::{Error, Result};
pub use model::{
    Dimension, FluidBc, Influence, MaterialModel, MaterialPoint, Mat3, Problem, SolverConfig, Vec3,
};
