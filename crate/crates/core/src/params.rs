//! Named parameter storage, initialization, and content digests.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Decides initialization and whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Embedding,
    Bias,
    Gain,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
    index: BTreeMap<String, usize>,
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter initialized according to its kind.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        kind: ParamKind,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        let tensor = match kind {
            ParamKind::Weight | ParamKind::Embedding => {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
            ParamKind::Bias => Tensor::zeros(shape),
            ParamKind::Gain => Tensor::filled(shape, 1.0),
        };
        self.insert(NamedTensor { name: name.to_string(), kind, tensor })
    }

    pub fn insert(&mut self, entry: NamedTensor) -> Result<ParamId> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {}", entry.name)));
        }
        let id = self.entries.len();
        self.index.insert(entry.name.clone(), id);
        self.entries.push(entry);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn entry(&self, id: ParamId) -> &NamedTensor {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Drops every parameter whose name fails the predicate. Invalidates ids.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|e| keep(&e.name));
        self.index = self.entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|e| !e.tensor.all_finite()).map(|e| e.name.as_str())
    }
}

/// SHA-256 over names, shapes, and little-endian values of the selected tensors,
/// visited in name order.
pub fn digest<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut hasher = Sha256::new();
    for (name, t) in sorted {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_by_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, &[50, 40], &mut rng).unwrap();
        let b = store.add("b", ParamKind::Bias, &[4], &mut rng).unwrap();
        let g = store.add("g", ParamKind::Gain, &[4], &mut rng).unwrap();
        assert!(store.get(w).data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = store.get(w).data().iter().sum::<f64>() / 2000.0;
        assert!(mean.abs() < 0.005);
        assert_eq!(store.get(b).data(), &[0.0; 4]);
        assert_eq!(store.get(g).data(), &[1.0; 4]);
        assert!(store.add("w", ParamKind::Bias, &[1], &mut rng).is_err());
    }

    #[test]
    fn digest_is_order_independent_and_value_sensitive() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        let d1 = digest([("a", &a), ("b", &b)]);
        let d2 = digest([("b", &b), ("a", &a)]);
        assert_eq!(d1, d2);
        let c = Tensor::vector(vec![1.0, 2.0 + 1e-15]);
        assert_ne!(d1, digest([("a", &c), ("b", &b)]));
    }

    #[test]
    fn retain_reindexes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("base.x", ParamKind::Bias, &[1], &mut rng).unwrap();
        store.add("head.y", ParamKind::Bias, &[1], &mut rng).unwrap();
        store.add("base.z", ParamKind::Bias, &[1], &mut rng).unwrap();
        store.retain(|n| !n.starts_with("head."));
        assert_eq!(store.len(), 2);
        assert_eq!(store.id("base.z").unwrap(), ParamId(1));
        assert!(store.id("head.y").is_err());
    }
}
