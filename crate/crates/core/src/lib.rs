//! Feasibility-supervised diffusion policy laboratory.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod geometry;
pub mod kinematics;
pub mod diffusion;
pub mod evaluation;
pub mod experiment;
pub mod scenario;
pub mod seeds;
