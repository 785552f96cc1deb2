//! Inference-time translation, reconstruction and cycle mapping.
//!
//! By default the latent code is the encoder mean (`eta = 0`). Sampled mode
//! draws `eta` per image from a generator seeded by the request seed and
//! the image index, so results do not depend on how images are batched.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{read_image, write_image};
use crate::error::{Result, UnitError};
use crate::model::{draw_noise, Domain, Mode, NoiseSource, UnitModel};
use crate::parallel;
use crate::tensor::{Real, Tensor};

/// Images per forward pass when translating many images.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1to2")]
    OneToTwo,
    #[serde(rename = "2to1")]
    TwoToOne,
    #[serde(rename = "reconstruct-1")]
    Reconstruct1,
    #[serde(rename = "reconstruct-2")]
    Reconstruct2,
    #[serde(rename = "cycle-1")]
    Cycle1,
    #[serde(rename = "cycle-2")]
    Cycle2,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Self::OneToTwo | Self::Reconstruct1 | Self::Cycle1 => Domain::One,
            _ => Domain::Two,
        }
    }

    pub fn target(self) -> Domain {
        match self {
            Self::OneToTwo | Self::Reconstruct2 | Self::Cycle2 => Domain::Two,
            _ => Domain::One,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::OneToTwo => "1to2",
            Self::TwoToOne => "2to1",
            Self::Reconstruct1 => "reconstruct-1",
            Self::Reconstruct2 => "reconstruct-2",
            Self::Cycle1 => "cycle-1",
            Self::Cycle2 => "cycle-2",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| UnitError::Config(format!("unknown direction '{}'", s)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    DeterministicMean,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationRequest {
    pub direction: Direction,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TranslationRequest {
    pub fn new(direction: Direction) -> Self {
        Self { direction, sampling: Sampling::DeterministicMean, seed: None }
    }

    pub fn sampled(direction: Direction, seed: u64) -> Self {
        Self { direction, sampling: Sampling::Sampled, seed: Some(seed) }
    }

    fn check(&self) -> Result<()> {
        if self.sampling == Sampling::Sampled && self.seed.is_none() {
            return Err(UnitError::Config("sampled translation needs a seed".into()));
        }
        Ok(())
    }
}

fn pass<F: Real>(
    model: &UnitModel<F>,
    tape: &mut Tape<'_, F>,
    from: Domain,
    to: Domain,
    x: Var,
    noise: &mut NoiseSource<'_>,
) -> Result<Var> {
    let mu = model.encoder(from).forward(tape, x, &mut Mode::eval())?;
    let eta = draw_noise(tape.shape(mu), noise);
    let eta = tape.input(eta);
    let z = tape.add(mu, eta)?;
    model.generator(to).forward(tape, z, &mut Mode::eval())
}

fn run<F: Real>(model: &UnitModel<F>, dir: Direction, x: &Tensor<F>, noise: &mut NoiseSource<'_>) -> Result<Tensor<F>> {
    let mut tape = Tape::no_grad(&model.store);
    let v = tape.input(x.clone());
    let src = dir.source();
    let out = match dir {
        Direction::OneToTwo | Direction::TwoToOne => pass(model, &mut tape, src, src.other(), v, noise)?,
        Direction::Reconstruct1 | Direction::Reconstruct2 => pass(model, &mut tape, src, src, v, noise)?,
        Direction::Cycle1 | Direction::Cycle2 => {
            let t = pass(model, &mut tape, src, src.other(), v, noise)?;
            pass(model, &mut tape, src.other(), src, t, noise)?
        }
    };
    Ok(tape.value(out).clone())
}

/// Translates an `[N, C, H, W]` batch of source-domain images.
pub fn translate<F: Real>(model: &UnitModel<F>, req: &TranslationRequest, x: &Tensor<F>) -> Result<Tensor<F>> {
    req.check()?;
    let want = model.spec.channels(req.direction.source());
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != want {
        return Err(UnitError::Dimension(format!(
            "{} expects domain-{} images with {} channels, got shape {:?}",
            req.direction.as_str(),
            req.direction.source().index(),
            want,
            shape
        )));
    }
    match (req.sampling, req.seed) {
        (Sampling::Sampled, Some(seed)) => {
            let n = shape[0];
            let outs = (0..n)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    run(model, req.direction, &x.select(&[i]), &mut NoiseSource::Gaussian(&mut rng))
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&outs.iter().collect::<Vec<_>>())
        }
        _ => run(model, req.direction, x, &mut NoiseSource::Zeros),
    }
}

/// Translates many images in chunks of [`CHUNK`], spread over threads.
pub fn translate_all<F: Real>(model: &UnitModel<F>, req: &TranslationRequest, x: &Tensor<F>) -> Result<Tensor<F>> {
    req.check()?;
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Ok(x.clone());
    }
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(CHUNK).map(<[usize]>::to_vec).collect();
    let outs = parallel::map(&chunks, |idx| -> Result<Tensor<F>> {
        let part = x.select(idx);
        match req.sampling {
            Sampling::DeterministicMean => translate(model, req, &part),
            Sampling::Sampled => {
                // keep per-image streams tied to the global index
                let seed = req.seed.expect("checked");
                let outs = idx
                    .iter()
                    .map(|&i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64);
                        run(model, req.direction, &x.select(&[i]), &mut NoiseSource::Gaussian(&mut rng))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tensor::cat(&outs.iter().collect::<Vec<_>>())
            }
        }
    });
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::cat(&outs.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub input: PathBuf,
    pub error: String,
}

/// Record of a directory translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationManifest {
    pub direction: Direction,
    pub sampling: Sampling,
    pub checkpoint_digest: String,
    pub translated: Vec<ManifestEntry>,
    pub skipped: Vec<SkipEntry>,
}

/// Translates every file of `input_dir` into `output_dir/<stem>.png`.
/// Files that fail to decode are listed as skipped; `manifest.json` is
/// written into `output_dir`.
pub fn batch_translate<F: Real>(
    model: &UnitModel<F>,
    checkpoint_digest: &str,
    input_dir: &Path,
    output_dir: &Path,
    req: &TranslationRequest,
) -> Result<TranslationManifest> {
    req.check()?;
    if !input_dir.is_dir() {
        return Err(UnitError::Dataset(format!("{} is not a directory", input_dir.display())));
    }
    fs::create_dir_all(output_dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(input_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let channels = model.spec.channels(req.direction.source());
    let size = model.spec.image_size();
    let results = parallel::map_range(files.len(), |i| -> std::result::Result<ManifestEntry, String> {
        let input = &files[i];
        let x = read_image(input, channels, Some(size)).map_err(|e| e.to_string())?;
        let x = x.reshape(&[1, channels, size, size]).map_err(|e| e.to_string())?.cast::<F>();
        let x = match (req.sampling, req.seed) {
            (Sampling::Sampled, Some(seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                run(model, req.direction, &x, &mut NoiseSource::Gaussian(&mut rng))
            }
            _ => translate(model, req, &x),
        }
        .map_err(|e| e.to_string())?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let output = output_dir.join(format!("{stem}.png"));
        write_image(&output, &x).map_err(|e| e.to_string())?;
        Ok(ManifestEntry { input: input.clone(), output })
    });
    let mut manifest = TranslationManifest {
        direction: req.direction,
        sampling: req.sampling,
        checkpoint_digest: checkpoint_digest.to_string(),
        translated: Vec::new(),
        skipped: Vec::new(),
    };
    for (file, r) in files.iter().zip(results) {
        match r {
            Ok(e) => manifest.translated.push(e),
            Err(error) => {
                log::warn!("skipping {}: {}", file.display(), error);
                manifest.skipped.push(SkipEntry { input: file.clone(), error });
            }
        }
    }
    fs::write(output_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, TranslationArch};

    fn tiny() -> UnitModel<f64> {
        let arch = TranslationArch { width: 2, res_width: 4, front_kernel: 3, res_blocks: 1, disc_layers: 2, disc_width: 2, shared_blocks: 1 };
        UnitModel::build(&ModelSpec::translation(&arch, 3, 3, 8), 1).unwrap()
    }

    fn input(n: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, 3, 8, 8], (0..n * 192).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap()
    }

    #[test]
    fn deterministic_and_shaped() {
        let m = tiny();
        let x = input(2);
        for d in [Direction::OneToTwo, Direction::Cycle1, Direction::Reconstruct2] {
            let req = TranslationRequest::new(d);
            let a = translate(&m, &req, &x).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a, translate(&m, &req, &x).unwrap());
            assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn channel_mismatch() {
        let m = tiny();
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert!(matches!(translate(&m, &TranslationRequest::new(Direction::TwoToOne), &x), Err(UnitError::Dimension(_))));
    }

    #[test]
    fn sampled_needs_seed_and_is_batch_invariant() {
        let m = tiny();
        let x = input(3);
        let mut req = TranslationRequest::sampled(Direction::OneToTwo, 4);
        let all = translate(&m, &req, &x).unwrap();
        let chunked = translate_all(&m, &req, &x).unwrap();
        assert_eq!(all, chunked);
        assert_ne!(all, translate(&m, &TranslationRequest::new(Direction::OneToTwo), &x).unwrap());
        req.seed = None;
        assert!(translate(&m, &req, &x).is_err());
    }

    #[test]
    fn batching_does_not_change_results() {
        let m = tiny();
        let x = input(20);
        let req = TranslationRequest::new(Direction::TwoToOne);
        let all = translate_all(&m, &req, &x).unwrap();
        let one = translate(&m, &req, &x.select(&[13])).unwrap();
        assert!(all.select(&[13]).data().iter().zip(one.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn direction_names() {
        for d in [Direction::OneToTwo, Direction::TwoToOne, Direction::Reconstruct1, Direction::Reconstruct2, Direction::Cycle1, Direction::Cycle2] {
            assert_eq!(d.as_str().parse::<Direction>().unwrap(), d);
        }
        assert!("sideways".parse::<Direction>().is_err());
    }
}
