//! Latent codes and the reparameterized sampler `z = mu + eta`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

/// Encoder mean, the added noise and the resulting sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<F> {
    pub mu: Tensor<F>,
    pub sample: Tensor<F>,
    pub noise: Tensor<F>,
}

/// Where `eta` comes from.
pub enum NoiseSource<'a> {
    /// `eta = 0`, giving `z = mu` (deterministic inference, tests).
    Zeros,
    /// i.i.d. standard normal draws.
    Gaussian(&'a mut ChaCha8Rng),
}

pub fn draw_noise<F: Real>(shape: &[usize], src: &mut NoiseSource<'_>) -> Tensor<F> {
    match src {
        NoiseSource::Zeros => Tensor::zeros(shape),
        NoiseSource::Gaussian(rng) => {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    F::of(z)
                })
                .collect();
            Tensor::from_vec(shape, data).expect("noise shape")
        }
    }
}

pub fn reparameterize<F: Real>(mu: &Tensor<F>, src: &mut NoiseSource<'_>) -> LatentCode<F> {
    let noise = draw_noise(mu.shape(), src);
    let mut sample = mu.clone();
    sample.add_assign(&noise);
    LatentCode { mu: mu.clone(), sample, noise }
}
