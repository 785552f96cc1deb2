//! The six-network model: two encoders, two generators, two discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{tie_parameters, Network, SharedGroup};
use super::presets::{DigitArch, TranslationArch};
use super::spec::{Init, NetworkSpec, Role, SharingPlan};
use crate::error::{Result, UnitError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

/// Which of the two image domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::One => Domain::Two,
            Domain::Two => Domain::One,
        }
    }
    pub fn index(self) -> usize {
        match self {
            Domain::One => 1,
            Domain::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder1: NetworkSpec,
    pub encoder2: NetworkSpec,
    pub generator1: NetworkSpec,
    pub generator2: NetworkSpec,
    pub discriminator1: NetworkSpec,
    pub discriminator2: NetworkSpec,
    pub sharing: SharingPlan,
    #[serde(default)]
    pub init: Init,
}

impl ModelSpec {
    /// Same architecture family for both domains.
    pub fn translation(arch: &TranslationArch, channels1: usize, channels2: usize, size: usize) -> Self {
        Self {
            encoder1: arch.encoder(channels1, size),
            encoder2: arch.encoder(channels2, size),
            generator1: arch.generator(channels1, size),
            generator2: arch.generator(channels2, size),
            discriminator1: arch.discriminator(channels1, size),
            discriminator2: arch.discriminator(channels2, size),
            sharing: arch.plan(),
            init: Init::default(),
        }
    }

    /// Digit encoders/generators with LeNet discriminators and shared
    /// discriminator trunks.
    pub fn digits(arch: &DigitArch, channels1: usize, channels2: usize) -> Self {
        let d1 = arch.lenet_discriminator(channels1);
        let e1 = arch.encoder(channels1);
        let g1 = arch.generator(channels1);
        let sharing = SharingPlan::from_specs(&e1, &g1, &d1);
        Self {
            encoder1: e1,
            encoder2: arch.encoder(channels2),
            generator1: g1,
            generator2: arch.generator(channels2),
            discriminator1: d1,
            discriminator2: arch.lenet_discriminator(channels2),
            sharing,
            init: Init::default(),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn channels(&self, d: Domain) -> usize {
        match d {
            Domain::One => self.encoder1.input_channels,
            Domain::Two => self.encoder2.input_channels,
        }
    }

    pub fn image_size(&self) -> usize {
        self.encoder1.input_size
    }

    /// Copy with the sharing flags of every spec rewritten to `plan`.
    pub fn with_sharing(&self, plan: SharingPlan) -> Self {
        let mut s = self.clone();
        s.sharing = plan;
        for spec in [
            &mut s.encoder1,
            &mut s.encoder2,
            &mut s.generator1,
            &mut s.generator2,
            &mut s.discriminator1,
            &mut s.discriminator2,
        ] {
            plan.apply(spec);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let roles = [
            (&self.encoder1, Role::Encoder),
            (&self.encoder2, Role::Encoder),
            (&self.generator1, Role::Generator),
            (&self.generator2, Role::Generator),
            (&self.discriminator1, Role::Discriminator),
            (&self.discriminator2, Role::Discriminator),
        ];
        for (spec, role) in roles {
            if spec.role != role {
                return Err(UnitError::Spec(format!("expected a {:?} spec, found {:?}", role, spec.role)));
            }
            spec.validate()?;
        }
        self.init.validate()?;
        for (e, g, d) in [
            (&self.encoder1, &self.generator1, &self.discriminator1),
            (&self.encoder2, &self.generator2, &self.discriminator2),
        ] {
            let (lc, ls) = e.output_dims()?;
            if (lc, ls) != (g.input_channels, g.input_size) {
                return Err(UnitError::Spec(format!(
                    "encoder output {}x{}x{} does not feed generator input {}x{}x{}",
                    lc, ls, ls, g.input_channels, g.input_size, g.input_size
                )));
            }
            let (oc, os) = g.output_dims()?;
            if (oc, os) != (e.input_channels, e.input_size) || (oc, os) != (d.input_channels, d.input_size) {
                return Err(UnitError::Spec(format!("generator output {}x{}x{} does not match its domain", oc, os, os)));
            }
        }
        if self.encoder1.output_dims()? != self.encoder2.output_dims()? {
            return Err(UnitError::Spec("the two encoders must map into the same latent shape".into()));
        }
        Ok(())
    }

    /// Latent map dims `(channels, size)`.
    pub fn latent_dims(&self) -> Result<(usize, usize)> {
        self.encoder1.output_dims()
    }
}

/// Built model: all parameters live in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitModel<F> {
    pub spec: ModelSpec,
    pub store: ParamStore<F>,
    pub e1: Network,
    pub e2: Network,
    pub g1: Network,
    pub g2: Network,
    pub d1: Network,
    pub d2: Network,
    pub shared: Vec<SharedGroup>,
}

impl<F: Real> UnitModel<F> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let spec = spec.with_sharing(spec.sharing);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e1 = Network::build("E1", &spec.encoder1, spec.init, &mut store, &mut rng)?;
        let mut e2 = Network::build("E2", &spec.encoder2, spec.init, &mut store, &mut rng)?;
        let g1 = Network::build("G1", &spec.generator1, spec.init, &mut store, &mut rng)?;
        let mut g2 = Network::build("G2", &spec.generator2, spec.init, &mut store, &mut rng)?;
        let d1 = Network::build("D1", &spec.discriminator1, spec.init, &mut store, &mut rng)?;
        let mut d2 = Network::build("D2", &spec.discriminator2, spec.init, &mut store, &mut rng)?;
        let plan = spec.sharing;
        let mut shared = tie_parameters(&mut store, &e1, &mut e2, plan.encoder_shared_layers)?;
        shared.extend(tie_parameters(&mut store, &g1, &mut g2, plan.generator_shared_layers)?);
        shared.extend(tie_parameters(&mut store, &d1, &mut d2, plan.discriminator_shared_layers)?);
        Ok(Self { spec, store, e1, e2, g1, g2, d1, d2, shared })
    }

    pub fn encoder(&self, d: Domain) -> &Network {
        match d {
            Domain::One => &self.e1,
            Domain::Two => &self.e2,
        }
    }
    pub fn generator(&self, d: Domain) -> &Network {
        match d {
            Domain::One => &self.g1,
            Domain::Two => &self.g2,
        }
    }
    pub fn discriminator(&self, d: Domain) -> &Network {
        match d {
            Domain::One => &self.d1,
            Domain::Two => &self.d2,
        }
    }

    fn dedup(mut v: Vec<ParamId>) -> Vec<ParamId> {
        v.sort();
        v.dedup();
        v
    }

    /// Parameters of the encoder/generator player.
    pub fn eg_ids(&self) -> Vec<ParamId> {
        let mut v = self.e1.ids();
        v.extend(self.e2.ids());
        v.extend(self.g1.ids());
        v.extend(self.g2.ids());
        Self::dedup(v)
    }

    /// Parameters of the discriminator player.
    pub fn d_ids(&self) -> Vec<ParamId> {
        let mut v = self.d1.ids();
        v.extend(self.d2.ids());
        Self::dedup(v)
    }

    pub fn eg_digest(&self) -> String {
        self.store.digest_of(self.eg_ids())
    }

    pub fn d_digest(&self) -> String {
        self.store.digest_of(self.d_ids())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_model_builds_with_one_shared_block_each_side() {
        let spec = ModelSpec::translation(&TranslationArch::desk(), 3, 3, 32);
        let m = UnitModel::<f32>::build(&spec, 0).unwrap();
        assert_eq!(m.shared.len(), 2);
        assert_eq!(m.e1.layers.last(), m.e2.layers.last());
        assert_eq!(m.g1.layers[0], m.g2.layers[0]);
        assert_ne!(m.g1.layers[1], m.g2.layers[1]);
        // no store entry is orphaned
        let mut used = m.eg_ids();
        used.extend(m.d_ids());
        assert_eq!(used.len(), m.store.len());
    }

    #[test]
    fn mismatched_latent_shapes_are_rejected() {
        let mut spec = ModelSpec::translation(&TranslationArch::desk(), 3, 3, 32);
        spec.generator1.input_channels = 7;
        assert!(UnitModel::<f32>::build(&spec, 0).is_err());
    }
}
