//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

pub mod gradcheck;
pub mod oracles;

use rand::SeedableRng;

use unitlab::autograd::{Grads, Tape};
use unitlab::data::{make_synthetic_domains, Dataset, SyntheticTransform};
use unitlab::model::{Mode, ModelSpec, Network, NoiseSource, SharingPlan, TranslationArch, UnitModel};
use unitlab::objectives::{graph, GanMode, LossWeights};
use unitlab::params::ParamId;
use unitlab::tensor::Tensor;
use unitlab::trainer::{forward_streams, Checkpoint, StreamOptions, Trainer, TrainerConfig};

pub fn tiny_arch() -> TranslationArch {
    TranslationArch { width: 2, res_width: 8, front_kernel: 3, res_blocks: 1, disc_layers: 2, disc_width: 2, shared_blocks: 1 }
}

pub fn tiny_spec() -> ModelSpec {
    ModelSpec::translation(&tiny_arch(), 3, 3, 16)
}

pub fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    let (d1, d2, _) = make_synthetic_domains(seed, 24, 16, SyntheticTransform::IntensityInvert).unwrap();
    (d1, d2)
}

pub fn tiny_config(seed: u64, iterations: u64) -> TrainerConfig {
    TrainerConfig { iterations, seed, log_interval: 1, checkpoint_interval: 0, learning_rate: 1e-3, ..Default::default() }
}

/// Deterministic pseudo-image in [-0.9, 0.9].
pub fn image(n: usize, c: usize, s: usize, k: usize) -> Tensor<f64> {
    let v = (0..n * c * s * s).map(|i| (((i * 7919 + k * 104729) % 997) as f64 / 498.5 - 1.0) * 0.9).collect::<Vec<_>>();
    Tensor::from_vec(&[n, c, s, s], v).unwrap()
}

/// 100 steps mixing lone D steps, lone G steps and full iterations. Returns
/// the trainer and whether every tied row read the same bits from both
/// networks after each step.
pub fn mixed_steps(steps: usize) -> (Trainer<f32>, bool) {
    let (d1, d2) = tiny_data(3);
    let mut t = Trainer::<f32>::new(&tiny_spec(), tiny_config(4, steps as u64)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut identical = true;
    for i in 0..steps {
        match i % 3 {
            0 => {
                t.iteration(&d1, &d2).unwrap();
            }
            1 => {
                let b = unitlab::data::sample_batch(&d1, &d2, 1, &mut rng).unwrap();
                t.discriminator_step(&b).unwrap();
            }
            _ => {
                let b = unitlab::data::sample_batch(&d1, &d2, 1, &mut rng).unwrap();
                t.generator_step(&b).unwrap();
            }
        }
        identical &= tied_rows_identical(&t.model);
    }
    (t, identical)
}

/// Compares the bytes behind every tied row of each network pair.
pub fn tied_rows_identical(m: &UnitModel<f32>) -> bool {
    let plan = m.spec.sharing;
    let pairs: [(&Network, &Network, usize, bool); 3] = [
        (&m.e1, &m.e2, plan.encoder_shared_layers, true),
        (&m.g1, &m.g2, plan.generator_shared_layers, false),
        (&m.d1, &m.d2, plan.discriminator_shared_layers, true),
    ];
    for (a, b, n, from_back) in pairs {
        for k in 0..n {
            let (ra, rb) = if from_back { (a.layers.len() - 1 - k, b.layers.len() - 1 - k) } else { (k, k) };
            let (ia, ib) = (a.layers[ra].ids(), b.layers[rb].ids());
            if ia.len() != ib.len() {
                return false;
            }
            for (x, y) in ia.iter().zip(&ib) {
                let (vx, vy) = (m.store.value(*x).data(), m.store.value(*y).data());
                if vx.iter().map(|v| v.to_bits()).ne(vy.iter().map(|v| v.to_bits())) {
                    return false;
                }
            }
        }
    }
    !m.shared.is_empty()
}

/// `(E/G untouched by D step, D changed, D untouched by G step, E/G changed)`.
pub fn player_isolation() -> [bool; 4] {
    let (d1, d2) = tiny_data(5);
    let mut t = Trainer::<f32>::new(&tiny_spec(), tiny_config(6, 10)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let b = unitlab::data::sample_batch(&d1, &d2, 1, &mut rng).unwrap();
    let (eg, d) = (t.model.eg_digest(), t.model.d_digest());
    t.discriminator_step(&b).unwrap();
    let a = [t.model.eg_digest() == eg, t.model.d_digest() != d];
    let (eg, d) = (t.model.eg_digest(), t.model.d_digest());
    t.generator_step(&b).unwrap();
    [a[0], a[1], t.model.d_digest() == d, t.model.eg_digest() != eg]
}

fn id_pairs(tied: &UnitModel<f64>, twin: &UnitModel<f64>) -> Vec<(ParamId, ParamId)> {
    let nets = |m: &UnitModel<f64>| [m.e1.clone(), m.e2.clone(), m.g1.clone(), m.g2.clone(), m.d1.clone(), m.d2.clone()];
    let mut out = Vec::new();
    for (a, b) in nets(tied).iter().zip(nets(twin).iter()) {
        for (la, lb) in a.layers.iter().chain(&a.head).zip(b.layers.iter().chain(&b.head)) {
            out.extend(la.ids().into_iter().zip(lb.ids()));
        }
    }
    out
}

fn all_losses(m: &UnitModel<f64>) -> Grads<f64> {
    let w = LossWeights { lambda0: 1.3, lambda1: 0.7, lambda2: 2.0, lambda3: 0.4, lambda4: 1.5 };
    let mut tape = Tape::new(&m.store);
    let x1 = tape.input(image(2, 3, 16, 1));
    let x2 = tape.input(image(2, 3, 16, 2));
    let opts = StreamOptions { reconstruction: true, cycle: true, training: true, shared_noise: false };
    let s = forward_streams(m, &mut tape, x1, x2, opts, &mut NoiseSource::Zeros).unwrap();
    let d = |tape: &mut Tape<'_, f64>, net: &Network, x| net.forward(tape, x, &mut Mode::train_deterministic()).unwrap();
    let (p12, p21) = (d(&mut tape, &m.d2, s.x12), d(&mut tape, &m.d1, s.x21));
    let (r1, r2) = (d(&mut tape, &m.d1, x1), d(&mut tape, &m.d2, x2));
    let terms = vec![
        graph::vae(&mut tape, s.mu1, x1, s.x11.unwrap(), &w).unwrap(),
        graph::vae(&mut tape, s.mu2, x2, s.x22.unwrap(), &w).unwrap(),
        graph::cc(&mut tape, s.mu1, s.mu12.unwrap(), x1, s.x121.unwrap(), &w).unwrap(),
        graph::cc(&mut tape, s.mu2, s.mu21.unwrap(), x2, s.x212.unwrap(), &w).unwrap(),
        graph::gan_g(&mut tape, p12, &w, GanMode::NonSaturating),
        graph::gan_g(&mut tape, p21, &w, GanMode::NonSaturating),
        graph::gan_d(&mut tape, r1, p21, &w),
        graph::gan_d(&mut tape, r2, p12, &w),
    ];
    let total = tape.sum(&terms);
    tape.backward(total)
}

/// Largest relative gap between the tied model's gradient and the sum of
/// the gradients of the untied copies in a twin holding the same values.
/// Also returns how many tied tensors were compared.
pub fn untied_twin_error(discriminator_rows: usize) -> (f64, usize) {
    let mut spec = tiny_spec();
    spec.sharing.discriminator_shared_layers = discriminator_rows;
    let tied = UnitModel::<f64>::build(&spec, 21).unwrap();
    let mut twin = UnitModel::<f64>::build(&spec.with_sharing(SharingPlan::none()), 22).unwrap();
    let pairs = id_pairs(&tied, &twin);
    for &(a, b) in &pairs {
        *twin.store.value_mut(b) = tied.store.value(a).clone();
    }
    let (gt, gw) = (all_losses(&tied), all_losses(&twin));
    let mut oracle: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
    let mut copies: BTreeMap<ParamId, usize> = BTreeMap::new();
    for &(a, b) in &pairs {
        let Some(g) = gw.get(b) else { continue };
        *copies.entry(a).or_default() += 1;
        let acc = oracle.entry(a).or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in acc.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    let mut worst = 0.0f64;
    for (id, want) in &oracle {
        let got = gt.get(*id).expect("tied gradient").data();
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs() / w.abs().max(1e-3 * scale));
        }
    }
    (worst, copies.values().filter(|&&c| c == 2).count())
}

/// Serialize, parse and serialize again.
pub fn checkpoint_bytes_round_trip() -> bool {
    let (d1, d2) = tiny_data(7);
    let mut t = Trainer::<f32>::new(&tiny_spec(), tiny_config(8, 5)).unwrap();
    t.run(&d1, &d2, None, |_, _| Ok(())).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    back.to_bytes().unwrap() == bytes && back.store == t.model.store
}

/// Trains `2n` steps straight through and `n` + save + load + `n`; returns
/// both final checkpoints' bytes and the two loss logs as JSON lines.
pub fn resume_pair(n: u64, dir: &std::path::Path) -> ((Vec<u8>, String), (Vec<u8>, String)) {
    let (d1, d2) = tiny_data(9);
    let log = |r: &[unitlab::trainer::LossRecord]| r.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>().join("\n");
    let mut a = Trainer::<f32>::new(&tiny_spec(), tiny_config(10, 2 * n)).unwrap();
    let la = a.run(&d1, &d2, None, |_, _| Ok(())).unwrap();
    let mut b = Trainer::<f32>::new(&tiny_spec(), tiny_config(10, n)).unwrap();
    let mut lb = b.run(&d1, &d2, None, |_, _| Ok(())).unwrap();
    let path = dir.join("half.bin");
    b.checkpoint().save(&path).unwrap();
    let mut c = Trainer::resume(Checkpoint::<f32>::load(&path).unwrap(), Some(tiny_config(10, 2 * n)), true).unwrap();
    lb.extend(c.run(&d1, &d2, None, |_, _| Ok(())).unwrap());
    ((a.checkpoint().to_bytes().unwrap(), log(&la)), (c.checkpoint().to_bytes().unwrap(), log(&lb)))
}
