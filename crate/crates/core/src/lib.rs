//! Classifier-free guided discrete diffusion over molecular graphs.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod graphdata;
pub mod nodecount;
pub mod rng;
pub mod schedule;
pub mod smiles;
pub mod synth;
