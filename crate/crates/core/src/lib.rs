//! Numerical core for robust formation control of double-integrator
//! multi-agent systems: invariant sets from ultimate bounds, leader–first-follower
//! graphs, closed-loop analysis, gain synthesis, tight formation planning and
//! simulation.

pub mod invariants;
pub mod matcore;
mod ode;
pub mod topology;
pub mod closedloop;
pub mod gainsynth;
pub mod tightform;
pub mod simkit;
