//! Central finite differences against the tape gradients on small
//! double-precision networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unitlab::autograd::{Tape, Var};
use unitlab::model::{DigitArch, Mode, ModelSpec, NoiseSource, TranslationArch, UnitModel};
pub use unitlab::objectives::GanMode;
use unitlab::objectives::{graph, LossWeights};
use unitlab::params::ParamId;
use unitlab::tensor::Tensor;
use unitlab::trainer::{forward_streams, StreamOptions};

const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

fn tiny_arch() -> TranslationArch {
    TranslationArch { width: 1, res_width: 4, front_kernel: 3, res_blocks: 1, disc_layers: 2, disc_width: 2, shared_blocks: 1 }
}

fn image(n: usize, c: usize, s: usize, k: usize) -> Tensor<f64> {
    let v = (0..n * c * s * s).map(|i| (((i * 7919 + k * 104729) % 997) as f64 / 498.5 - 1.0) * 0.9).collect::<Vec<_>>();
    Tensor::from_vec(&[n, c, s, s], v).unwrap()
}

/// Largest relative gap between the tape gradient and central differences
/// over `ids` (at most `limit` coordinates per tensor), plus the number of
/// coordinates compared.
fn check(model: &mut UnitModel<f64>, ids: &[ParamId], limit: usize, f: &dyn Fn(&mut Tape<'_, f64>, &UnitModel<f64>) -> Var) -> (f64, usize) {
    let grads = {
        let mut tape = Tape::new(&model.store);
        let loss = f(&mut tape, model);
        tape.backward(loss)
    };
    let eval = |m: &UnitModel<f64>| {
        let mut tape = Tape::no_grad(&m.store);
        let l = f(&mut tape, m);
        tape.value(l).item()
    };
    let (mut worst, mut checked) = (0.0f64, 0);
    for &id in ids {
        let n = model.store.value(id).len();
        let stride = (n / limit).max(1);
        for i in (0..n).step_by(stride) {
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(model);
            model.store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(model);
            model.store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            let scale = numeric.abs().max(analytic.abs()).max(1e-4);
            worst = worst.max((numeric - analytic).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}

/// The N(0, 0.02) initialization leaves deep pre-activations within the
/// difference step of the leaky-ReLU kink; O(1) weights keep the oracle
/// well conditioned.
fn spread(m: &mut UnitModel<f64>, seed: u64) {
    let ids: Vec<ParamId> = m.store.ids().filter(|id| m.store.is_trainable(*id)).collect();
    for id in ids {
        let fan: usize = m.store.value(id).shape().iter().skip(1).product::<usize>().max(1);
        let scale = 1.5 / (fan as f64).sqrt();
        for (i, v) in m.store.value_mut(id).data_mut().iter_mut().enumerate() {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (id.0 as u64 + seed).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            *v = ((h >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.0 * scale;
        }
    }
}

fn translation_model() -> UnitModel<f64> {
    let mut m = UnitModel::build(&ModelSpec::translation(&tiny_arch(), 3, 3, 8), 11).unwrap();
    spread(&mut m, 3);
    assert!(m.store.num_trainable() <= 2000, "{} parameters", m.store.num_trainable());
    m
}

fn weights() -> LossWeights {
    LossWeights { lambda0: 1.3, lambda1: 0.7, lambda2: 2.0, lambda3: 0.4, lambda4: 1.5 }
}

pub fn vae_loss() -> (f64, usize) {
    let mut m = translation_model();
    let ids = m.eg_ids();
    let x = image(2, 3, 8, 1);
    check(&mut m, &ids, 12, &|tape, m| {
        let xv = tape.input(x.clone());
        let x2 = tape.input(image(2, 3, 8, 2));
        let opts = StreamOptions { reconstruction: true, cycle: false, training: true, shared_noise: false };
        let s = forward_streams(m, tape, xv, x2, opts, &mut NoiseSource::Zeros).unwrap();
        graph::vae(tape, s.mu1, xv, s.x11.unwrap(), &weights()).unwrap()
    })
}

pub fn cc_loss() -> (f64, usize) {
    let mut m = translation_model();
    let ids = m.eg_ids();
    check(&mut m, &ids, 12, &|tape, m| {
        let x1 = tape.input(image(1, 3, 8, 3));
        let x2 = tape.input(image(1, 3, 8, 4));
        let opts = StreamOptions { reconstruction: false, cycle: true, training: true, shared_noise: false };
        let s = forward_streams(m, tape, x1, x2, opts, &mut NoiseSource::Zeros).unwrap();
        graph::cc(tape, s.mu1, s.mu12.unwrap(), x1, s.x121.unwrap(), &weights()).unwrap()
    })
}

pub fn gan_d_loss() -> (f64, usize) {
    let mut m = translation_model();
    let ids = m.d_ids();
    check(&mut m, &ids, 20, &|tape, m| {
        let real = tape.input(image(2, 3, 8, 5));
        let fake = tape.input(image(2, 3, 8, 6).map(|v| v * 0.5));
        let pr = m.d1.forward(tape, real, &mut Mode::train_deterministic()).unwrap();
        let pf = m.d1.forward(tape, fake, &mut Mode::train_deterministic()).unwrap();
        graph::gan_d(tape, pr, pf, &weights())
    })
}

pub fn gan_g_loss(mode: GanMode) -> (f64, usize) {
    let mut m = translation_model();
    let ids = m.eg_ids();
    check(&mut m, &ids, 8, &|tape, m| {
        let x1 = tape.input(image(1, 3, 8, 7));
        let x2 = tape.input(image(1, 3, 8, 8));
        let opts = StreamOptions { reconstruction: false, cycle: false, training: true, shared_noise: false };
        let s = forward_streams(m, tape, x1, x2, opts, &mut NoiseSource::Zeros).unwrap();
        let p = m.d2.forward(tape, s.x12, &mut Mode::train_deterministic()).unwrap();
        graph::gan_g(tape, p, &weights(), mode)
    })
}

pub fn classifier_loss() -> (f64, usize) {
    // LeNet discriminator with its softmax head, narrowed to stay small
    let arch = DigitArch::new(28).unwrap().with_div(50);
    let spec = ModelSpec::digits(&arch, 1, 1);
    let mut m = UnitModel::<f64>::build(&spec, 5).unwrap();
    spread(&mut m, 8);
    let ids: Vec<ParamId> = m.d1.ids().into_iter().filter(|id| m.store.is_trainable(*id)).collect();
    let labels = vec![3usize, 7, 1];
    check(&mut m, &ids, 10, &|tape, m| {
        let x = tape.input(image(3, 1, 28, 9));
        // a fresh generator per evaluation keeps the dropout masks fixed
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m.d1.discriminate(tape, x, &mut Mode::train(&mut rng)).unwrap();
        let probs = m.d1.classify(tape, out.features, &mut Mode::train(&mut rng)).unwrap();
        graph::classifier(tape, probs, &labels, 0.8).unwrap()
    })
}
