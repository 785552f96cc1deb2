//! Subnetwork specs, construction, weight tying and forward passes.

pub mod latent;
pub mod network;
pub mod presets;
pub mod spec;
pub mod unit;

pub use latent::{draw_noise, reparameterize, LatentCode, NoiseSource};
pub use network::{build_network, tie_parameters, DiscOutput, LayerParams, Mode, Network, SharedGroup};
pub use presets::{DigitArch, TranslationArch};
pub use spec::{Activation, Init, LayerKind, LayerSpec, NetworkSpec, Norm, Role, SharingPlan};
pub use unit::{Domain, ModelSpec, UnitModel};
