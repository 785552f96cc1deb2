//! Alternating optimization of the joint objective.
//!
//! Each iteration runs a discriminator step (encoders and generators
//! frozen, translated images carry no gradient) followed by a generator
//! step (discriminators frozen). Only images of the translation stream are
//! judged by the discriminators.

mod adam;
mod checkpoint;

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamSettings};
pub use checkpoint::{config_digest, Checkpoint, CheckpointEntry, CheckpointManifest, CHECKPOINT_VERSION};

use crate::autograd::{Grads, Tape, Var};
use crate::data::{sample_batch, Dataset};
pub use crate::data::DomainBatch;
use crate::error::{Result, UnitError};
use crate::model::{draw_noise, Domain, Mode, ModelSpec, NoiseSource, SharingPlan, UnitModel};
use crate::objectives::{graph, GanMode, LossBreakdown, LossWeights};
use crate::params::ParamId;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub iterations: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub use_weight_sharing: bool,
    pub use_cycle_consistency: bool,
    /// Loss records are kept for step 1, every multiple of this and the
    /// last step.
    pub log_interval: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    pub gan_mode: GanMode,
    /// Images per domain per step.
    pub batch_size: usize,
    /// Discriminator steps per iteration, each on a fresh batch.
    pub d_steps: usize,
    /// `false` sets the latent noise to zero during training.
    pub sample_noise: bool,
    /// Reuse one noise draw for the two domains' codes within a stream.
    pub shared_noise: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            iterations: 100_000,
            seed: 0,
            weights: LossWeights::default(),
            use_weight_sharing: true,
            use_cycle_consistency: true,
            log_interval: 100,
            checkpoint_interval: 10_000,
            gan_mode: GanMode::default(),
            batch_size: 1,
            d_steps: 1,
            sample_noise: true,
            shared_noise: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UnitError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{} must lie in [0, 1), got {}", name, b));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if !self.use_weight_sharing && !self.use_cycle_consistency {
            return bad("at least one of use_weight_sharing and use_cycle_consistency must be on".into());
        }
        if self.batch_size == 0 || self.d_steps == 0 || self.log_interval == 0 {
            return bad("batch_size, d_steps and log_interval must be at least 1".into());
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Extra discriminator-side terms used by domain adaptation. Both zero for
/// plain translation training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxWeights {
    /// Cross-entropy of the classifier head on labeled domain-1 images.
    pub classifier: f64,
    /// L1 between discriminator features of same-code image pairs.
    pub feature_l1: f64,
}

/// Outputs of one pass through the three streams.
#[derive(Clone, Debug)]
pub struct Streams {
    pub mu1: Var,
    pub mu2: Var,
    pub z1: Var,
    pub z2: Var,
    /// Reconstruction stream.
    pub x11: Option<Var>,
    pub x22: Option<Var>,
    /// Translation stream.
    pub x12: Var,
    pub x21: Var,
    /// Cycle stream: codes of the translated images and the images mapped
    /// back.
    pub mu12: Option<Var>,
    pub mu21: Option<Var>,
    pub x121: Option<Var>,
    pub x212: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamOptions {
    pub reconstruction: bool,
    pub cycle: bool,
    /// Batch-norm mode of encoders and generators.
    pub training: bool,
    /// One noise draw per pair of encodings instead of one per encoding.
    pub shared_noise: bool,
}

fn encode<F: Real>(model: &UnitModel<F>, tape: &mut Tape<'_, F>, d: Domain, x: Var, training: bool) -> Result<Var> {
    model.encoder(d).forward(tape, x, &mut Mode { training, rng: None })
}

/// `z = mu + eta` for a pair of codes; with `shared` both codes receive the
/// same draw.
fn perturb_pair<F: Real>(tape: &mut Tape<'_, F>, a: Var, b: Var, shared: bool, noise: &mut NoiseSource<'_>) -> Result<(Var, Var)> {
    let ea = draw_noise(tape.shape(a), noise);
    let eb = if shared { ea.clone() } else { draw_noise(tape.shape(b), noise) };
    let (ea, eb) = (tape.input(ea), tape.input(eb));
    Ok((tape.add(a, ea)?, tape.add(b, eb)?))
}

/// Records the reconstruction, translation and cycle streams on `tape`.
/// Noise is drawn independently for every encoding unless
/// `opts.shared_noise` is set.
pub fn forward_streams<F: Real>(
    model: &UnitModel<F>,
    tape: &mut Tape<'_, F>,
    x1: Var,
    x2: Var,
    opts: StreamOptions,
    noise: &mut NoiseSource<'_>,
) -> Result<Streams> {
    let t = opts.training;
    let gen = |tape: &mut Tape<'_, F>, d: Domain, z: Var| model.generator(d).forward(tape, z, &mut Mode { training: t, rng: None });
    let mu1 = encode(model, tape, Domain::One, x1, t)?;
    let mu2 = encode(model, tape, Domain::Two, x2, t)?;
    let (z1, z2) = perturb_pair(tape, mu1, mu2, opts.shared_noise, noise)?;
    let (x11, x22) = if opts.reconstruction {
        (Some(gen(tape, Domain::One, z1)?), Some(gen(tape, Domain::Two, z2)?))
    } else {
        (None, None)
    };
    let x12 = gen(tape, Domain::Two, z1)?;
    let x21 = gen(tape, Domain::One, z2)?;
    let (mut mu12, mut mu21, mut x121, mut x212) = (None, None, None, None);
    if opts.cycle {
        let m12 = encode(model, tape, Domain::Two, x12, t)?;
        let m21 = encode(model, tape, Domain::One, x21, t)?;
        let (z12, z21) = perturb_pair(tape, m12, m21, opts.shared_noise, noise)?;
        mu12 = Some(m12);
        mu21 = Some(m21);
        x121 = Some(gen(tape, Domain::One, z12)?);
        x212 = Some(gen(tape, Domain::Two, z21)?);
    }
    Ok(Streams { mu1, mu2, z1, z2, x11, x22, x12, x21, mu12, mu21, x121, x212 })
}

/// Discriminator step outcome.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DRecord {
    pub d1: f64,
    pub d2: f64,
    pub classifier: f64,
    pub feature_l1: f64,
    pub total: f64,
    pub skipped: bool,
}

/// Generator step outcome.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GRecord {
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub skipped: bool,
}

/// One line of the JSON-lines loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub d_loss: f64,
    pub d1: f64,
    pub d2: f64,
    pub classifier: f64,
    pub feature_l1: f64,
    pub vae1: f64,
    pub vae2: f64,
    pub gan1: f64,
    pub gan2: f64,
    pub cc1: f64,
    pub cc2: f64,
    pub total: f64,
    pub d_skipped: bool,
    pub g_skipped: bool,
}

impl LossRecord {
    pub fn new(step: u64, d: &DRecord, g: &GRecord) -> Self {
        let l = &g.losses;
        Self {
            step,
            d_loss: d.total,
            d1: d.d1,
            d2: d.d2,
            classifier: d.classifier,
            feature_l1: d.feature_l1,
            vae1: l.vae1,
            vae2: l.vae2,
            gan1: l.gan1,
            gan2: l.gan2,
            cc1: l.cc1,
            cc2: l.cc2,
            total: l.total,
            d_skipped: d.skipped,
            g_skipped: g.skipped,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown::new(self.vae1, self.vae2, self.gan1, self.gan2, self.cc1, self.cc2)
    }
}

/// Moment buffers of both players.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<F> {
    pub d: Adam<F>,
    pub g: Adam<F>,
}

/// Training state: model, optimizers, RNG and step counter.
#[derive(Clone, Debug)]
pub struct Trainer<F: Real> {
    pub config: TrainerConfig,
    pub aux: AuxWeights,
    pub model: UnitModel<F>,
    pub opt: OptimizerState<F>,
    /// Drives batch sampling, latent noise and dropout.
    pub rng: ChaCha8Rng,
    pub step: u64,
}

/// Model spec actually trained under `config`: without weight sharing the
/// encoder and generator plans are emptied (discriminator ties stay).
pub fn effective_spec(spec: &ModelSpec, config: &TrainerConfig) -> ModelSpec {
    if config.use_weight_sharing {
        spec.with_sharing(spec.sharing)
    } else {
        spec.with_sharing(SharingPlan { discriminator_shared_layers: spec.sharing.discriminator_shared_layers, ..SharingPlan::none() })
    }
}

fn value<F: Real>(tape: &Tape<'_, F>, v: Option<Var>) -> f64 {
    v.map(|v| tape.value(v).item().f64()).unwrap_or(0.0)
}

impl<F: Real> Trainer<F> {
    pub fn new(spec: &ModelSpec, config: TrainerConfig) -> Result<Self> {
        Self::with_aux(spec, config, AuxWeights::default())
    }

    pub fn with_aux(spec: &ModelSpec, config: TrainerConfig, aux: AuxWeights) -> Result<Self> {
        config.validate()?;
        if !(aux.classifier >= 0.0 && aux.feature_l1 >= 0.0) {
            return Err(UnitError::Config(format!("auxiliary weights must be non-negative: {:?}", aux)));
        }
        let model = UnitModel::build(&effective_spec(spec, &config), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self { config, aux, model, opt: OptimizerState::default(), rng, step: 0 })
    }

    pub fn config_digest(&self) -> String {
        config_digest(&self.model.spec, &self.config, &self.aux)
    }

    fn apply(&mut self, grads: &Grads<F>, buffers: Vec<(ParamId, Vec<F>)>, ids: &[ParamId], d_player: bool) -> bool {
        let settings = self.config.adam();
        let opt = if d_player { &mut self.opt.d } else { &mut self.opt.g };
        if !opt.update(&mut self.model.store, grads, ids, &settings) {
            log::warn!("non-finite gradient at step {}; {} update skipped", self.step + 1, if d_player { "D" } else { "E/G" });
            return false;
        }
        let own: HashSet<ParamId> = ids.iter().copied().collect();
        for (id, v) in buffers {
            if own.contains(&id) {
                self.model.store.value_mut(id).data_mut().copy_from_slice(&v);
            }
        }
        true
    }

    /// One update of D1 and D2.
    pub fn discriminator_step(&mut self, batch: &DomainBatch<F>) -> Result<DRecord> {
        let d_ids = self.model.d_ids();
        let (grads, buffers, mut rec) = {
            let model = &self.model;
            let rng = &mut self.rng;
            let mut tape = Tape::new(&model.store);
            tape.freeze(model.eg_ids());
            let x1 = tape.input(batch.x1.clone());
            let x2 = tape.input(batch.x2.clone());
            let opts = StreamOptions {
                reconstruction: self.aux.feature_l1 > 0.0,
                cycle: false,
                training: true,
                shared_noise: self.config.shared_noise,
            };
            let s = if self.config.sample_noise {
                forward_streams(model, &mut tape, x1, x2, opts, &mut NoiseSource::Gaussian(rng))?
            } else {
                forward_streams(model, &mut tape, x1, x2, opts, &mut NoiseSource::Zeros)?
            };
            let w = &self.config.weights;
            let real1 = model.d1.discriminate(&mut tape, x1, &mut Mode::train(rng))?;
            let fake1 = model.d1.discriminate(&mut tape, s.x21, &mut Mode::train(rng))?;
            let real2 = model.d2.discriminate(&mut tape, x2, &mut Mode::train(rng))?;
            let fake2 = model.d2.discriminate(&mut tape, s.x12, &mut Mode::train(rng))?;
            let d1 = graph::gan_d(&mut tape, real1.prob, fake1.prob, w);
            let d2 = graph::gan_d(&mut tape, real2.prob, fake2.prob, w);
            let mut terms = vec![d1, d2];
            let mut cls = None;
            if self.aux.classifier > 0.0 {
                let labels = batch
                    .labels1
                    .as_ref()
                    .ok_or_else(|| UnitError::Config("classifier term needs labeled domain-1 batches".into()))?;
                let probs = model.d1.classify(&mut tape, real1.features, &mut Mode::train(rng))?;
                let c = graph::classifier(&mut tape, probs, labels, self.aux.classifier)?;
                cls = Some(c);
                terms.push(c);
            }
            let mut fl1 = None;
            if self.aux.feature_l1 > 0.0 {
                let (x11, x22) = (s.x11.expect("reconstruction"), s.x22.expect("reconstruction"));
                let f11 = model.d1.discriminate(&mut tape, x11, &mut Mode::train(rng))?.features;
                let f12 = model.d2.discriminate(&mut tape, s.x12, &mut Mode::train(rng))?.features;
                let f22 = model.d2.discriminate(&mut tape, x22, &mut Mode::train(rng))?.features;
                let f21 = model.d1.discriminate(&mut tape, s.x21, &mut Mode::train(rng))?.features;
                let a = graph::feature_l1(&mut tape, f11, f12, self.aux.feature_l1)?;
                let b = graph::feature_l1(&mut tape, f22, f21, self.aux.feature_l1)?;
                let f = tape.sum(&[a, b]);
                fl1 = Some(f);
                terms.push(f);
            }
            let total = tape.sum(&terms);
            let rec = DRecord {
                d1: value(&tape, Some(d1)),
                d2: value(&tape, Some(d2)),
                classifier: value(&tape, cls),
                feature_l1: value(&tape, fl1),
                total: value(&tape, Some(total)),
                skipped: false,
            };
            (tape.backward(total), tape.take_buffer_updates(), rec)
        };
        rec.skipped = !self.apply(&grads, buffers, &d_ids, true);
        Ok(rec)
    }

    /// One update of E1, E2, G1 and G2.
    pub fn generator_step(&mut self, batch: &DomainBatch<F>) -> Result<GRecord> {
        let eg_ids = self.model.eg_ids();
        let ws = self.config.use_weight_sharing;
        let cc = self.config.use_cycle_consistency;
        let (grads, buffers, losses) = {
            let model = &self.model;
            let rng = &mut self.rng;
            let mut tape = Tape::new(&model.store);
            tape.freeze(model.d_ids());
            let x1 = tape.input(batch.x1.clone());
            let x2 = tape.input(batch.x2.clone());
            let opts = StreamOptions { reconstruction: ws, cycle: cc, training: true, shared_noise: self.config.shared_noise };
            let s = if self.config.sample_noise {
                forward_streams(model, &mut tape, x1, x2, opts, &mut NoiseSource::Gaussian(rng))?
            } else {
                forward_streams(model, &mut tape, x1, x2, opts, &mut NoiseSource::Zeros)?
            };
            let w = &self.config.weights;
            let p1 = model.d1.forward(&mut tape, s.x21, &mut Mode::train(rng))?;
            let p2 = model.d2.forward(&mut tape, s.x12, &mut Mode::train(rng))?;
            let gan1 = graph::gan_g(&mut tape, p1, w, self.config.gan_mode);
            let gan2 = graph::gan_g(&mut tape, p2, w, self.config.gan_mode);
            let mut terms = vec![gan1, gan2];
            let (mut vae1, mut vae2, mut cc1, mut cc2) = (None, None, None, None);
            if ws {
                vae1 = Some(graph::vae(&mut tape, s.mu1, x1, s.x11.expect("reconstruction"), w)?);
                vae2 = Some(graph::vae(&mut tape, s.mu2, x2, s.x22.expect("reconstruction"), w)?);
            }
            if cc {
                cc1 = Some(graph::cc(&mut tape, s.mu1, s.mu12.expect("cycle"), x1, s.x121.expect("cycle"), w)?);
                cc2 = Some(graph::cc(&mut tape, s.mu2, s.mu21.expect("cycle"), x2, s.x212.expect("cycle"), w)?);
            }
            terms.extend([vae1, vae2, cc1, cc2].into_iter().flatten());
            let total = tape.sum(&terms);
            let losses = LossBreakdown::new(
                value(&tape, vae1),
                value(&tape, vae2),
                value(&tape, Some(gan1)),
                value(&tape, Some(gan2)),
                value(&tape, cc1),
                value(&tape, cc2),
            );
            (tape.backward(total), tape.take_buffer_updates(), losses)
        };
        let skipped = !self.apply(&grads, buffers, &eg_ids, false);
        Ok(GRecord { losses, skipped })
    }

    fn check_datasets(&self, d1: &Dataset, d2: &Dataset) -> Result<()> {
        for (d, dom) in [(d1, Domain::One), (d2, Domain::Two)] {
            if d.is_empty() {
                return Err(UnitError::Config(format!("domain {} dataset is empty", dom.index())));
            }
            let want = (self.model.spec.channels(dom), self.model.spec.image_size());
            if (d.channels, d.resolution) != want {
                return Err(UnitError::Config(format!(
                    "domain {} images are {}x{}x{}, the model expects {}x{}x{}",
                    dom.index(),
                    d.channels,
                    d.resolution,
                    d.resolution,
                    want.0,
                    want.1,
                    want.1
                )));
            }
        }
        if self.aux.classifier > 0.0 && d1.labels.is_none() {
            return Err(UnitError::Config("classifier term needs a labeled domain-1 dataset".into()));
        }
        Ok(())
    }

    /// D steps then one G step; advances the step counter.
    pub fn iteration(&mut self, d1: &Dataset, d2: &Dataset) -> Result<LossRecord> {
        let bs = self.config.batch_size;
        let mut d = DRecord::default();
        let mut batch = sample_batch(d1, d2, bs, &mut self.rng)?;
        for i in 0..self.config.d_steps {
            if i > 0 {
                batch = sample_batch(d1, d2, bs, &mut self.rng)?;
            }
            d = self.discriminator_step(&batch)?;
        }
        let g = self.generator_step(&batch)?;
        self.step += 1;
        Ok(LossRecord::new(self.step, &d, &g))
    }

    fn logged(&self, step: u64) -> bool {
        step == 1 || step % self.config.log_interval == 0 || step == self.config.iterations
    }

    /// Runs until `config.iterations`. With an output directory, appends
    /// logged records to `loss.jsonl` and writes checkpoints under
    /// `checkpoints/`, always including the final step. `on_step` sees the
    /// trainer after every iteration.
    pub fn run(
        &mut self,
        d1: &Dataset,
        d2: &Dataset,
        out: Option<&Path>,
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        self.check_datasets(d1, d2)?;
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join("loss.jsonl"))?)
            }
            None => None,
        };
        let mut records = Vec::new();
        let mut last_saved = None;
        while self.step < self.config.iterations {
            let rec = self.iteration(d1, d2)?;
            if self.logged(rec.step) {
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                }
                log::info!("step {} d {:.4} g {:.4}", rec.step, rec.d_loss, rec.total);
                records.push(rec);
            }
            if let Some(dir) = out {
                if self.config.checkpoint_interval > 0 && self.step % self.config.checkpoint_interval == 0 {
                    self.checkpoint().save_in(dir)?;
                    last_saved = Some(self.step);
                }
            }
            on_step(self, &rec)?;
        }
        if let Some(dir) = out {
            if last_saved != Some(self.step) {
                self.checkpoint().save_in(dir)?;
            }
        }
        Ok(records)
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            aux: self.aux,
            model_spec: self.model.spec.clone(),
            store: self.model.store.clone(),
            opt: self.opt.clone(),
            rng: self.rng.clone(),
            config_digest: self.config_digest(),
        }
    }

    /// Restores a trainer. `config` replaces the stored one (for example to
    /// extend `iterations`); its digest must match unless `force` is set.
    pub fn resume(ckpt: Checkpoint<F>, config: Option<TrainerConfig>, force: bool) -> Result<Self> {
        let config = config.unwrap_or_else(|| ckpt.config.clone());
        config.validate()?;
        let digest = config_digest(&ckpt.model_spec, &config, &ckpt.aux);
        if digest != ckpt.config_digest && !force {
            return Err(UnitError::Load(format!(
                "checkpoint was written under config {} but the current config is {}",
                ckpt.config_digest, digest
            )));
        }
        let model = ckpt.model()?;
        Ok(Self { config, aux: ckpt.aux, model, opt: ckpt.opt, rng: ckpt.rng, step: ckpt.step })
    }
}

/// Builds a trainer and runs it to completion.
pub fn train<F: Real>(
    spec: &ModelSpec,
    config: TrainerConfig,
    d1: &Dataset,
    d2: &Dataset,
    out: Option<&Path>,
) -> Result<(Checkpoint<F>, Vec<LossRecord>)> {
    let mut t = Trainer::new(spec, config)?;
    let log = t.run(d1, d2, out, |_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}
