//! Parameter storage shared by all subnetworks of a model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers (batch-norm running statistics) are not trainable.
    pub trainable: bool,
}

/// All tensors of a model keyed by id. Tied layers hold the same id, so a
/// shared group is one storage cell no matter how many networks use it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<ParamId, ParamEntry<F>>,
    next: u32,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new(), next: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        self.entries.insert(id, ParamEntry { name: name.into(), value, trainable });
        id
    }

    /// Gaussian(0, std) initialized trainable tensor.
    pub fn insert_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::of(z * std)
            })
            .collect();
        self.insert(name, Tensor::from_vec(shape, data).expect("shape"), true)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<ParamEntry<F>> {
        self.entries.remove(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[&id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries.get_mut(&id).expect("unknown parameter").value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[&id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.trainable)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_id(&self) -> u32 {
        self.next
    }

    /// Rebuilds a store from explicit entries (checkpoint loading).
    pub fn from_entries(entries: BTreeMap<ParamId, ParamEntry<F>>, next: u32) -> Self {
        Self { entries, next }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// SHA-256 over ids, shapes and raw bits of the selected tensors.
    pub fn digest_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for id in ids {
            let e = &self.entries[&id];
            h.update(id.0.to_le_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            e.value.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex(&h.finalize())
    }

    pub fn digest(&self) -> String {
        self.digest_of(self.ids().collect::<Vec<_>>())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digest_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let a = s.insert_normal("a", &[3, 2], 0.02, &mut rng);
        let d0 = s.digest();
        s.value_mut(a).data_mut()[0] += 1.0;
        assert_ne!(d0, s.digest());
    }

    #[test]
    fn init_std_is_close_to_requested() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::<f64>::new();
        let a = s.insert_normal("w", &[200, 100], 0.02, &mut rng);
        let v = s.value(a).data();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.001);
    }
}
