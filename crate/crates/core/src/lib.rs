//! Unsupervised image-to-image translation with coupled VAE-GANs.
//!
//! Two encoders map images of two domains into one latent space, two
//! generators decode latent codes into either domain and two discriminators
//! judge the results. The high-level encoder layers and the low-level
//! generator layers are tied across domains; a cycle term asks that an image
//! translated twice comes back unchanged.
//!
//! [`trainer::Trainer`] alternates discriminator and encoder/generator
//! updates, [`translator`] applies a trained model, [`evaluation`] scores
//! translations against aligned ground truth and runs ablations and sweeps,
//! and [`adaptation`] adds a classifier head for unsupervised domain
//! adaptation on digits. Everything runs on the CPU through a small
//! tape-based autograd ([`autograd`]) over [`Tensor`].

pub mod adaptation;
pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod translator;

pub use error::{Result, UnitError};
pub use tensor::{Real, Tensor};
