//! Ready-made network specs: the image-translation family (conv front-end,
//! residual back-end) and the digit family used for domain adaptation.

use serde::{Deserialize, Serialize};

use super::spec::{Activation, LayerSpec, NetworkSpec, Role, SharingPlan};
use crate::error::{Result, UnitError};

const LRELU: Activation = Activation::LeakyRelu;

/// Conv front-end + residual back-end encoder, mirrored generator and a stack
/// of stride-2 convolutions as discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationArch {
    /// Channels of the first encoder conv; later convs use 2x and 4x.
    pub width: usize,
    /// Channels of the residual blocks.
    pub res_width: usize,
    pub front_kernel: usize,
    /// Residual blocks in the encoder back-end (the last is the mu layer)
    /// and, separately, in the generator front-end.
    pub res_blocks: usize,
    /// Stride-2 convolutions before the final 2x2 sigmoid layer.
    pub disc_layers: usize,
    /// Base width of the discriminator.
    pub disc_width: usize,
    /// Residual blocks tied between the two encoders / generators.
    pub shared_blocks: usize,
}

impl TranslationArch {
    /// Full-size network for 256x256 images.
    pub fn full() -> Self {
        Self { width: 64, res_width: 512, front_kernel: 7, res_blocks: 4, disc_layers: 5, disc_width: 64, shared_blocks: 1 }
    }

    /// Narrow variant for 32x32 desk-scale experiments.
    pub fn desk() -> Self {
        Self { width: 8, res_width: 32, front_kernel: 5, res_blocks: 2, disc_layers: 4, disc_width: 8, shared_blocks: 1 }
    }

    pub fn encoder(&self, channels: usize, size: usize) -> NetworkSpec {
        let w = self.width;
        let mut layers = vec![
            LayerSpec::conv(w, self.front_kernel, 1).act(LRELU),
            LayerSpec::conv(2 * w, 3, 2).act(LRELU),
            LayerSpec::conv(4 * w, 3, 2).act(LRELU),
        ];
        layers.extend((0..self.res_blocks).map(|_| LayerSpec::resblk(self.res_width)));
        let mut spec = NetworkSpec::new(Role::Encoder, channels, size, layers);
        self.plan().apply(&mut spec);
        spec
    }

    pub fn generator(&self, channels: usize, size: usize) -> NetworkSpec {
        let w = self.width;
        let mut layers: Vec<LayerSpec> = (0..self.res_blocks).map(|_| LayerSpec::resblk(self.res_width)).collect();
        layers.push(LayerSpec::deconv(4 * w, 3, 2).act(LRELU));
        layers.push(LayerSpec::deconv(2 * w, 3, 2).act(LRELU));
        layers.push(LayerSpec::deconv(channels, 1, 1).act(Activation::Tanh));
        let mut spec = NetworkSpec::new(Role::Generator, self.res_width, size / 4, layers);
        self.plan().apply(&mut spec);
        spec
    }

    pub fn discriminator(&self, channels: usize, size: usize) -> NetworkSpec {
        let mut layers: Vec<LayerSpec> =
            (0..self.disc_layers).map(|i| LayerSpec::conv(self.disc_width << i, 3, 2).act(LRELU)).collect();
        layers.push(LayerSpec::conv(1, 2, 1).pad(0).act(Activation::Sigmoid));
        NetworkSpec::new(Role::Discriminator, channels, size, layers)
    }

    pub fn plan(&self) -> SharingPlan {
        SharingPlan::vae(self.shared_blocks)
    }
}

/// Digit-scale encoder/generator with batch norm and LeNet/DTN style
/// discriminators carrying a 10-way classifier head. `div` divides every
/// hidden width (1 = full size).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DigitArch {
    pub div: usize,
    pub size: usize,
    pub classes: usize,
}

impl DigitArch {
    pub fn new(size: usize) -> Result<Self> {
        if size != 28 && size != 32 {
            return Err(UnitError::Spec(format!("digit networks support 28 or 32 pixel inputs, got {}", size)));
        }
        Ok(Self { div: 1, size, classes: 10 })
    }

    pub fn with_div(mut self, div: usize) -> Self {
        self.div = div.max(1);
        self
    }

    fn n(&self, v: usize) -> usize {
        (v / self.div).max(1)
    }

    pub fn encoder(&self, channels: usize) -> NetworkSpec {
        let second_pad = if self.size == 28 { 3 } else { 2 };
        let layers = vec![
            LayerSpec::conv(self.n(64), 5, 2).pad(2).bn().act(LRELU),
            LayerSpec::conv(self.n(128), 5, 2).pad(second_pad).bn().act(LRELU).shared(true),
            LayerSpec::conv(self.n(256), 8, 1).pad(0).bn().act(LRELU).shared(true),
            LayerSpec::conv(self.n(512), 1, 1).bn().act(LRELU).shared(true),
            LayerSpec::conv(self.n(1024), 1, 1).shared(true),
        ];
        NetworkSpec::new(Role::Encoder, channels, self.size, layers)
    }

    pub fn generator(&self, channels: usize) -> NetworkSpec {
        let last_pad = if self.size == 28 { 3 } else { 1 };
        let layers = vec![
            LayerSpec::deconv(self.n(512), 4, 2).pad(0).out_pad(0).bn().act(LRELU).shared(true),
            LayerSpec::deconv(self.n(256), 4, 2).pad(1).bn().act(LRELU).shared(true),
            LayerSpec::deconv(self.n(128), 4, 2).pad(1).bn().act(LRELU).shared(true),
            LayerSpec::deconv(self.n(64), 4, 2).pad(last_pad).out_pad(0).bn().act(LRELU),
            LayerSpec::deconv(channels, 1, 1).act(Activation::Tanh),
        ];
        NetworkSpec::new(Role::Generator, self.n(1024), 1, layers)
    }

    /// Two conv/pool stages, FC-500 and the two heads.
    pub fn lenet_discriminator(&self, channels: usize) -> NetworkSpec {
        let layers = vec![
            LayerSpec::conv(self.n(20), 5, 1).pad(0),
            LayerSpec::pool(2, 2),
            LayerSpec::conv(self.n(50), 5, 1).pad(0).shared(true),
            LayerSpec::pool(2, 2).shared(true),
            LayerSpec::fc(self.n(500)).act(Activation::Relu).drop(0.5).shared(true),
            LayerSpec::fc(1).act(Activation::Sigmoid).shared(true),
        ];
        let mut spec = NetworkSpec::new(Role::Discriminator, channels, self.size, layers);
        spec.classifier_head = vec![LayerSpec::fc(self.classes).act(Activation::Softmax).shared(true)];
        spec
    }

    /// Four conv/pool stages and the two heads; dropout on every trunk stage.
    pub fn dtn_discriminator(&self, channels: usize, dropout: f64) -> NetworkSpec {
        let mut layers = Vec::new();
        for (i, n) in [64, 128, 256, 512].into_iter().enumerate() {
            layers.push(LayerSpec::conv(self.n(n), 5, 1).pad(2).drop(dropout).shared(i > 0));
            layers.push(LayerSpec::pool(2, 2).shared(i > 0));
        }
        layers.push(LayerSpec::fc(1).act(Activation::Sigmoid).shared(true));
        let mut spec = NetworkSpec::new(Role::Discriminator, channels, self.size, layers);
        spec.classifier_head = vec![LayerSpec::fc(self.classes).act(Activation::Softmax).shared(true)];
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let t = TranslationArch::full();
        t.encoder(3, 256).validate().unwrap();
        t.generator(3, 256).validate().unwrap();
        t.discriminator(3, 256).validate().unwrap();
        let d = TranslationArch::desk();
        d.encoder(3, 32).validate().unwrap();
        d.generator(3, 32).validate().unwrap();
        d.discriminator(3, 32).validate().unwrap();
        for size in [28, 32] {
            let a = DigitArch::new(size).unwrap();
            a.encoder(3).validate().unwrap();
            a.generator(3).validate().unwrap();
            a.lenet_discriminator(1).validate().unwrap();
            a.dtn_discriminator(5, 0.5).validate().unwrap();
        }
    }

    #[test]
    fn digit_round_trip_sizes() {
        for size in [28, 32] {
            let a = DigitArch::new(size).unwrap();
            assert_eq!(a.encoder(3).output_dims().unwrap(), (1024, 1));
            assert_eq!(a.generator(3).output_dims().unwrap(), (3, size));
        }
        assert!(DigitArch::new(30).is_err());
    }

    #[test]
    fn digit_sharing_flags_follow_tables() {
        let a = DigitArch::new(28).unwrap();
        assert_eq!(a.encoder(1).trailing_shared(), 4);
        assert_eq!(a.generator(1).leading_shared(), 3);
        assert_eq!(a.lenet_discriminator(1).trailing_shared(), 4);
        assert_eq!(a.dtn_discriminator(3, 0.5).trailing_shared(), 7);
    }
}
