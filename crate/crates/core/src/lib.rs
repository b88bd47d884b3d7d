//! Tri-plane volume avatars driven by motion coefficients.
//!
//! A latent-modulated generator emits a tri-plane feature volume, a small
//! decoder turns summed plane features into color and density, and a
//! volume renderer composites them along camera rays. A motion controller
//! maps windows of expression/pose coefficients to offsets in the
//! per-layer latent space, and the decoupling-by-inverting trainer
//! separates identity codes from motion codes by alternating latent
//! inversion with controller updates.

pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod engine;
pub mod generator;
pub mod inversion;
pub mod losses;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod synthetic;
pub mod triplane;

pub mod bench;
pub mod diagnostics;
pub mod image_io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("op `{0}` has no backward rule")]
    UnsupportedOp(&'static str),
    #[error("engine: {0}")]
    Engine(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
