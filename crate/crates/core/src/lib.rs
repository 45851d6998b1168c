//! Bayesian experimental design of scan angles for sparse-view computed
//! tomography.

pub mod design;
pub mod error;
pub mod experiment;
pub mod image;
pub mod io;
pub mod linalg;
pub mod neural;
pub mod operator;
pub mod optim;
pub mod phantom;
pub mod prior;
pub mod recon;
pub mod rng;
pub mod tomo;
pub mod tv;

pub use error::{Error, Result};
pub use image::Image;
