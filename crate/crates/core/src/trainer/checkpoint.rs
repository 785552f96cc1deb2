//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "UNITCKPT"
//! version    u32
//! header_len u64
//! header     JSON (step, configs, model spec, RNG state, tensor index)
//! payload    raw tensor values in index order: parameters, then the first
//!            and second moments of the D optimizer, then of the E/G optimizer
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, AuxWeights, OptimizerState, TrainerConfig};
use crate::error::{Result, UnitError};
use crate::model::{ModelSpec, UnitModel};
use crate::params::{hex, ParamEntry, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UNITCKPT";
const MANIFEST: &str = "manifest.json";

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub step: u64,
    pub config: TrainerConfig,
    pub aux: AuxWeights,
    pub model_spec: ModelSpec,
    pub store: ParamStore<F>,
    pub opt: OptimizerState<F>,
    pub rng: ChaCha8Rng,
    pub config_digest: String,
}

/// SHA-256 of the model spec, auxiliary weights and trainer config with the
/// run-length fields (iterations, log and checkpoint intervals) blanked.
pub fn config_digest(spec: &ModelSpec, config: &TrainerConfig, aux: &AuxWeights) -> String {
    let c = TrainerConfig { iterations: 0, log_interval: 1, checkpoint_interval: 0, ..config.clone() };
    let v = serde_json::json!({ "model": spec, "trainer": c, "aux": aux });
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    id: ParamId,
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    config_digest: String,
    config: TrainerConfig,
    aux: AuxWeights,
    model_spec: ModelSpec,
    rng: ChaCha8Rng,
    next_id: u32,
    params: Vec<TensorIndex>,
    d_step: u64,
    d_moments: Vec<ParamId>,
    g_step: u64,
    g_moments: Vec<ParamId>,
}

fn put<F: Real>(out: &mut Vec<u8>, t: &Tensor<F>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| UnitError::Integrity("checkpoint payload is truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn tensor<F: Real>(&mut self, shape: &[usize]) -> Result<Tensor<F>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * F::BYTES)?;
        Tensor::from_vec(shape, bytes.chunks_exact(F::BYTES).map(F::read_le).collect())
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self
            .store
            .iter()
            .map(|(id, e)| TensorIndex { id, name: e.name.clone(), shape: e.value.shape().to_vec(), trainable: e.trainable })
            .collect();
        let header = Header {
            dtype: F::NAME.to_string(),
            step: self.step,
            config_digest: self.config_digest.clone(),
            config: self.config.clone(),
            aux: self.aux,
            model_spec: self.model_spec.clone(),
            rng: self.rng.clone(),
            next_id: self.store.next_id(),
            params,
            d_step: self.opt.d.step,
            d_moments: self.opt.d.moments.keys().copied().collect(),
            g_step: self.opt.g.step,
            g_moments: self.opt.g.moments.keys().copied().collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, e) in self.store.iter() {
            put(&mut out, &e.value);
        }
        for adam in [&self.opt.d, &self.opt.g] {
            for (m, v) in adam.moments.values() {
                put(&mut out, m);
                put(&mut out, v);
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(UnitError::Integrity(format!("checkpoint of {} bytes is truncated", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(UnitError::Load("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(UnitError::Load(format!("checkpoint version {} is not supported (expected {})", version, CHECKPOINT_VERSION)));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(UnitError::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, at: 12 };
        let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| UnitError::Integrity(format!("checkpoint header: {}", e)))?;
        if header.dtype != F::NAME {
            return Err(UnitError::Load(format!("checkpoint holds {} values, expected {}", header.dtype, F::NAME)));
        }
        let mut entries = BTreeMap::new();
        for p in &header.params {
            let value = r.tensor(&p.shape)?;
            entries.insert(p.id, ParamEntry { name: p.name.clone(), value, trainable: p.trainable });
        }
        let store = ParamStore::from_entries(entries, header.next_id);
        let mut read_adam = |step: u64, ids: &[ParamId]| -> Result<Adam<F>> {
            let mut moments = BTreeMap::new();
            for id in ids {
                if !store.contains(*id) {
                    return Err(UnitError::Integrity(format!("moments for unknown parameter {:?}", id)));
                }
                let shape = store.value(*id).shape().to_vec();
                let m = r.tensor(&shape)?;
                let v = r.tensor(&shape)?;
                moments.insert(*id, (m, v));
            }
            Ok(Adam { step, moments })
        };
        let d = read_adam(header.d_step, &header.d_moments)?;
        let g = read_adam(header.g_step, &header.g_moments)?;
        if r.at != body.len() {
            return Err(UnitError::Integrity(format!("{} trailing bytes in checkpoint", body.len() - r.at)));
        }
        Ok(Self {
            step: header.step,
            config: header.config,
            aux: header.aux,
            model_spec: header.model_spec,
            store,
            opt: OptimizerState { d, g },
            rng: header.rng,
            config_digest: header.config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &bytes)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self) -> Result<UnitModel<F>> {
        let mut model = UnitModel::build(&self.model_spec, self.config.seed)?;
        let same_layout = model.store.len() == self.store.len()
            && model
                .store
                .iter()
                .zip(self.store.iter())
                .all(|((a, ea), (b, eb))| a == b && ea.name == eb.name && ea.value.shape() == eb.value.shape());
        if !same_layout {
            return Err(UnitError::Load("checkpoint parameters do not match the stored model spec".into()));
        }
        model.store = self.store.clone();
        Ok(model)
    }

    pub fn file_name(step: u64) -> String {
        format!("ckpt_{step}.bin")
    }

    /// Writes `<run>/checkpoints/ckpt_{step}.bin` and records it in the
    /// manifest next to it.
    pub fn save_in(&self, run_dir: &Path) -> Result<PathBuf> {
        let dir = run_dir.join("checkpoints");
        let path = dir.join(Self::file_name(self.step));
        let sha256 = self.save(&path)?;
        let mut manifest = CheckpointManifest::load(&dir).unwrap_or_default();
        manifest.checkpoints.retain(|e| e.step != self.step);
        manifest.checkpoints.push(CheckpointEntry {
            step: self.step,
            file: Self::file_name(self.step),
            config_digest: self.config_digest.clone(),
            sha256,
        });
        manifest.checkpoints.sort_by_key(|e| e.step);
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Digest of all parameter values.
    pub fn params_digest(&self) -> String {
        self.store.digest()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub file: String,
    pub config_digest: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checkpoints: Vec<CheckpointEntry>,
}

impl CheckpointManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
    }

    /// Path of the most recent checkpoint listed in `dir`.
    pub fn latest(dir: &Path) -> Result<PathBuf> {
        let m = Self::load(dir)?;
        let last = m.checkpoints.last().ok_or_else(|| UnitError::Load(format!("no checkpoints listed in {}", dir.display())))?;
        Ok(dir.join(&last.file))
    }
}
