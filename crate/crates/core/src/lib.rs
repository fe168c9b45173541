//! Motion-DVAE: a dynamical VAE motion prior with unsupervised learned
//! denoising, built on a compact 22-joint articulated body.

pub mod corpus;
pub mod denoiser;
pub mod diffmath;
pub mod error;
pub mod kinematics;
pub mod metrics_eval;
pub mod motion_dvae;
pub mod noise_model;
pub mod trajectory_fit;

pub use error::{Error, Result};
