//! The deep-image-prior network, its training, and the linearised-network
//! image prior built from its Jacobian.

mod checkpoint;
pub mod conv;
mod jacobian;
mod linearised;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use jacobian::{dense_jacobian, DenseJacobian, Jacobian, NetworkJacobian};
pub use linearised::{
    block_grams, compute_g, compute_gprior_scale, fit_block_prior, fit_block_variances,
    measurement_jacobian, fit_gprior, FittedBlockPrior, FittedGPrior, GPriorScale, LinearisedPrior, ThetaPrior,
};
pub use network::{ForwardCache, Network, NetworkSpec};
pub use train::{dip_loss, train_dip, train_dip_observed, TrainConfig, TrainedNetwork};
