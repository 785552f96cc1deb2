//! Loss terms of the joint objective.
//!
//! Every expectation is a per-element mean (over batch, channels, spatial
//! positions and latent elements). The Laplacian reconstruction likelihood
//! has unit scale with its constants dropped, so its negative log is the
//! mean absolute error. Logs of probabilities are clamped at [`LOG_EPS`].
//!
//! Each term exists twice: a plain evaluator on tensors and a builder that
//! records the same expression on an autograd [`Tape`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Result, UnitError};
use crate::tensor::{Real, Tensor};

pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// GAN terms.
    pub lambda0: f64,
    /// KL terms of the VAE streams.
    pub lambda1: f64,
    /// Reconstruction terms of the VAE streams.
    pub lambda2: f64,
    /// KL terms of the cycle streams.
    pub lambda3: f64,
    /// Reconstruction terms of the cycle streams.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda0: 10.0, lambda1: 0.1, lambda2: 100.0, lambda3: 0.1, lambda4: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(UnitError::Config(format!("loss weights must be finite and non-negative: {:?}", all)));
        }
        Ok(())
    }
}

/// The six generator-side terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vae1: f64,
    pub vae2: f64,
    pub gan1: f64,
    pub gan2: f64,
    pub cc1: f64,
    pub cc2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(vae1: f64, vae2: f64, gan1: f64, gan2: f64, cc1: f64, cc2: f64) -> Self {
        let mut b = Self { vae1, vae2, gan1, gan2, cc1, cc2, total: 0.0 };
        b.total = total_objective(&b);
        b
    }
}

/// Adversarial loss used for the generator player.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    /// `lambda0 * E[log(1 - D(G(z)))]`, minimized by the generator.
    PaperSaturating,
    /// `-lambda0 * E[log D(G(z))]`.
    #[default]
    NonSaturating,
}

/// `0.5 * mean(mu^2)`: KL(N(mu, I) || N(0, I)) per latent element.
pub fn kl_std_normal<F: Real>(mu: &Tensor<F>) -> f64 {
    if mu.is_empty() {
        return 0.0;
    }
    0.5 * mu.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>() / mu.len() as f64
}

/// Mean absolute difference.
pub fn recon_nll<F: Real>(x: &Tensor<F>, x_hat: &Tensor<F>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(dim_err!("reconstruction of {:?} compared with {:?}", x_hat.shape(), x.shape()));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.data().iter().zip(x_hat.data()).map(|(a, b)| (a.f64() - b.f64()).abs()).sum::<f64>() / x.len() as f64)
}

pub fn vae_loss<F: Real>(mu: &Tensor<F>, x: &Tensor<F>, x_hat: &Tensor<F>, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda1 * kl_std_normal(mu) + w.lambda2 * recon_nll(x, x_hat)?)
}

fn check_probs<F: Real>(p: &Tensor<F>) -> Result<()> {
    match p.data().iter().find(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
        Some(v) => Err(UnitError::Domain(format!("discriminator output {:?} outside (0, 1)", v))),
        None => Ok(()),
    }
}

fn mean_log(p: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in p {
        s += v.max(LOG_EPS).ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Discriminator loss (minimization form):
/// `-lambda0 * (E[log D(real)] + E[log(1 - D(fake))])`.
pub fn gan_d_loss<F: Real>(d_real: &Tensor<F>, d_fake: &Tensor<F>, w: &LossWeights) -> Result<f64> {
    check_probs(d_real)?;
    check_probs(d_fake)?;
    let real = mean_log(d_real.data().iter().map(|v| v.f64()));
    let fake = mean_log(d_fake.data().iter().map(|v| 1.0 - v.f64()));
    Ok(-w.lambda0 * (real + fake))
}

/// Generator adversarial loss on translated images.
pub fn gan_g_loss<F: Real>(d_fake: &Tensor<F>, w: &LossWeights, mode: GanMode) -> Result<f64> {
    check_probs(d_fake)?;
    Ok(match mode {
        GanMode::PaperSaturating => w.lambda0 * mean_log(d_fake.data().iter().map(|v| 1.0 - v.f64())),
        GanMode::NonSaturating => -w.lambda0 * mean_log(d_fake.data().iter().map(|v| v.f64())),
    })
}

/// Cycle term: KL on the first-pass code, KL on the code of the translated
/// image and the reconstruction error of the twice-translated image.
pub fn cc_loss<F: Real>(
    mu_first: &Tensor<F>,
    mu_second: &Tensor<F>,
    x: &Tensor<F>,
    x_cycled: &Tensor<F>,
    w: &LossWeights,
) -> Result<f64> {
    Ok(w.lambda3 * kl_std_normal(mu_first) + w.lambda3 * kl_std_normal(mu_second) + w.lambda4 * recon_nll(x, x_cycled)?)
}

pub fn total_objective(parts: &LossBreakdown) -> f64 {
    parts.vae1 + parts.vae2 + parts.gan1 + parts.gan2 + parts.cc1 + parts.cc2
}

/// Builders that record the terms on a tape.
pub mod graph {
    use super::*;

    pub fn kl<F: Real>(tape: &mut Tape<'_, F>, mu: Var) -> Var {
        tape.half_mean_square(mu)
    }

    pub fn recon<F: Real>(tape: &mut Tape<'_, F>, x: Var, x_hat: Var) -> Result<Var> {
        tape.l1_mean(x, x_hat)
    }

    pub fn vae<F: Real>(tape: &mut Tape<'_, F>, mu: Var, x: Var, x_hat: Var, w: &LossWeights) -> Result<Var> {
        let k = kl(tape, mu);
        let k = tape.scale(k, w.lambda1);
        let r = recon(tape, x, x_hat)?;
        let r = tape.scale(r, w.lambda2);
        Ok(tape.sum(&[k, r]))
    }

    pub fn gan_d<F: Real>(tape: &mut Tape<'_, F>, d_real: Var, d_fake: Var, w: &LossWeights) -> Var {
        let a = tape.mean_log(d_real, LOG_EPS);
        let b = tape.mean_log1m(d_fake, LOG_EPS);
        let s = tape.sum(&[a, b]);
        tape.scale(s, -w.lambda0)
    }

    pub fn gan_g<F: Real>(tape: &mut Tape<'_, F>, d_fake: Var, w: &LossWeights, mode: GanMode) -> Var {
        match mode {
            GanMode::PaperSaturating => {
                let l = tape.mean_log1m(d_fake, LOG_EPS);
                tape.scale(l, w.lambda0)
            }
            GanMode::NonSaturating => {
                let l = tape.mean_log(d_fake, LOG_EPS);
                tape.scale(l, -w.lambda0)
            }
        }
    }

    pub fn cc<F: Real>(
        tape: &mut Tape<'_, F>,
        mu_first: Var,
        mu_second: Var,
        x: Var,
        x_cycled: Var,
        w: &LossWeights,
    ) -> Result<Var> {
        let k1 = kl(tape, mu_first);
        let k2 = kl(tape, mu_second);
        let k = tape.sum(&[k1, k2]);
        let k = tape.scale(k, w.lambda3);
        let r = recon(tape, x, x_cycled)?;
        let r = tape.scale(r, w.lambda4);
        Ok(tape.sum(&[k, r]))
    }

    /// Cross-entropy of class probabilities against labels, weighted.
    pub fn classifier<F: Real>(tape: &mut Tape<'_, F>, probs: Var, labels: &[usize], weight: f64) -> Result<Var> {
        let l = tape.nll(probs, labels, LOG_EPS)?;
        Ok(tape.scale(l, weight))
    }

    /// `weight * mean |f1 - f2|`
    pub fn feature_l1<F: Real>(tape: &mut Tape<'_, F>, f1: Var, f2: Var, weight: f64) -> Result<Var> {
        let l = tape.l1_mean(f1, f2)?;
        Ok(tape.scale(l, weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_std_normal(&Tensor::<f64>::zeros(&[5])), 0.0);
        assert!((kl_std_normal(&t(&[4], &[1.0, 1.0, 0.0, 0.0])) - 0.25).abs() < 1e-15);
        let mu = t(&[3], &[0.3, -1.2, 2.0]);
        let scaled = mu.map(|v| v * 3.0);
        assert!((kl_std_normal(&scaled) - 9.0 * kl_std_normal(&mu)).abs() < 1e-12);
    }

    #[test]
    fn recon_examples() {
        let x = t(&[2, 2], &[0.1, -0.4, 0.9, 0.0]);
        assert_eq!(recon_nll(&x, &x).unwrap(), 0.0);
        let off = x.map(|v| v + 0.5);
        assert!((recon_nll(&x, &off).unwrap() - 0.5).abs() < 1e-12);
        assert!(recon_nll(&x, &t(&[4], &[0.0; 4])).is_err());
    }

    #[test]
    fn vae_examples() {
        let w = LossWeights::default();
        let x = t(&[4], &[0.2, 0.4, -0.2, 0.0]);
        assert_eq!(vae_loss(&Tensor::zeros(&[4]), &x, &x, &w).unwrap(), 0.0);
        // kl 0.25, recon 0.1
        let mu = t(&[4], &[1.0, 1.0, 0.0, 0.0]);
        let xh = x.map(|v| v + 0.1);
        assert!((vae_loss(&mu, &x, &xh, &w).unwrap() - 10.025).abs() < 1e-9);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, ..w };
        assert_eq!(vae_loss(&mu, &x, &xh, &zero).unwrap(), 0.0);
    }

    #[test]
    fn gan_examples() {
        let w = LossWeights::default();
        let half = t(&[3], &[0.5; 3]);
        assert!((gan_d_loss(&half, &half, &w).unwrap() - 20.0 * 2f64.ln()).abs() < 1e-9);
        let near = gan_d_loss(&t(&[1], &[1.0 - 1e-7]), &t(&[1], &[1e-7]), &w).unwrap();
        assert!(near.abs() < 1e-5);
        let off = LossWeights { lambda0: 0.0, ..w };
        assert_eq!(gan_d_loss(&half, &half, &off).unwrap(), 0.0);
        assert!((gan_g_loss(&half, &w, GanMode::PaperSaturating).unwrap() + 6.931471805599453).abs() < 1e-9);
        assert!((gan_g_loss(&half, &w, GanMode::NonSaturating).unwrap() - 6.931471805599453).abs() < 1e-9);
        assert!(gan_g_loss(&t(&[1], &[1.0 - 1e-7]), &w, GanMode::NonSaturating).unwrap() < 1e-5);
        assert!(matches!(gan_d_loss(&t(&[1], &[1.5]), &half, &w), Err(UnitError::Domain(_))));
    }

    #[test]
    fn clamp_keeps_losses_finite() {
        let w = LossWeights::default();
        let l = gan_d_loss(&t(&[1], &[0.0]), &t(&[1], &[1.0]), &w).unwrap();
        assert!(l.is_finite());
        assert!((l - 2.0 * 10.0 * -(1e-7f64.ln())).abs() < 1e-6);
    }

    #[test]
    fn cc_examples() {
        let w = LossWeights::default();
        let x = t(&[2], &[0.3, -0.3]);
        let z = Tensor::<f64>::zeros(&[2]);
        assert_eq!(cc_loss(&z, &z, &x, &x, &w).unwrap(), 0.0);
        // kl 0.25 and 0.16, recon 0.02
        let m1 = t(&[2], &[1.0, 0.0]);
        let m2 = t(&[2], &[0.8, 0.0]);
        let xc = x.map(|v| v + 0.02);
        assert!((cc_loss(&m1, &m2, &x, &xc, &w).unwrap() - 2.041).abs() < 1e-9);
        let off = LossWeights { lambda3: 0.0, lambda4: 0.0, ..w };
        assert_eq!(cc_loss(&m1, &m2, &x, &xc, &off).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_objective(&LossBreakdown::default()), 0.0);
        assert_eq!(LossBreakdown::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0).total, 21.0);
    }

    #[test]
    fn graph_terms_match_evaluators() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let w = LossWeights { lambda0: 3.0, lambda1: 0.7, lambda2: 5.0, lambda3: 0.2, lambda4: 9.0 };
        let mu = t(&[2, 3], &[0.1, -0.5, 2.0, 1.1, 0.0, -0.3]);
        let mu2 = mu.map(|v| v * 0.5 - 0.1);
        let x = t(&[1, 4], &[0.9, -0.9, 0.2, 0.0]);
        let xh = t(&[1, 4], &[0.7, -0.1, 0.2, 0.4]);
        let p = t(&[3], &[0.2, 0.6, 0.999]);
        let q = t(&[3], &[0.01, 0.5, 0.7]);
        let (vm, vm2, vx, vxh, vp, vq) =
            (tape.input(mu.clone()), tape.input(mu2.clone()), tape.input(x.clone()), tape.input(xh.clone()), tape.input(p.clone()), tape.input(q.clone()));
        let a = graph::vae(&mut tape, vm, vx, vxh, &w).unwrap();
        assert!((tape.value(a).item() - vae_loss(&mu, &x, &xh, &w).unwrap()).abs() < 1e-12);
        let b = graph::cc(&mut tape, vm, vm2, vx, vxh, &w).unwrap();
        assert!((tape.value(b).item() - cc_loss(&mu, &mu2, &x, &xh, &w).unwrap()).abs() < 1e-12);
        let c = graph::gan_d(&mut tape, vp, vq, &w);
        assert!((tape.value(c).item() - gan_d_loss(&p, &q, &w).unwrap()).abs() < 1e-12);
        for mode in [GanMode::PaperSaturating, GanMode::NonSaturating] {
            let d = graph::gan_g(&mut tape, vq, &w, mode);
            assert!((tape.value(d).item() - gan_g_loss(&q, &w, mode).unwrap()).abs() < 1e-12);
        }
    }
}
