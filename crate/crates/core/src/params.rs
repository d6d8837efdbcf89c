//! Named parameter storage, gradient buffers and deterministic initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Which store a parameter lives in. The language model is kept separate so it can
/// be frozen, hashed and stripped on export independently of the trainable model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StoreKind {
    Model,
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub store: StoreKind,
    pub index: u32,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Mat<T>,
    pub frozen: bool,
    /// Whether decoupled weight decay applies. Off for norms, biases and embeddings of position.
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    kind: StoreKind,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(kind: StoreKind) -> Self {
        Self { kind, entries: Vec::new() }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, frozen: false, decay });
        ParamId { store: self.kind, index: (self.entries.len() - 1) as u32 }
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        debug_assert_eq!(id.store, self.kind);
        &self.entries[id.index as usize].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        debug_assert_eq!(id.store, self.kind);
        &mut self.entries[id.index as usize].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.index as usize]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(move |i| ParamId { store: self.kind, index: i as u32 })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId { store: self.kind, index: i as u32 })
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = true;
        }
    }

    pub fn is_frozen(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.frozen)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn names_with_prefix<'s>(&'s self, prefix: &'s str) -> impl Iterator<Item = &'s str> + 's {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix)).map(|e| e.name.as_str())
    }

    /// Content hash over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(T::DTYPE.as_bytes());
        let mut buf = Vec::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update((e.value.rows as u64).to_le_bytes());
            h.update((e.value.cols as u64).to_le_bytes());
            buf.clear();
            for &v in &e.value.data {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            kind: self.kind,
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), frozen: e.frozen, decay: e.decay })
                .collect(),
        }
    }
}

/// Gradient accumulator shaped like one store.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    pub kind: StoreKind,
    pub grads: Vec<Mat<T>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            kind: store.kind(),
            grads: store.entries().iter().map(|e| Mat::zeros(e.value.rows, e.value.cols)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.grads[id.index as usize]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data.iter()).map(|v| v.f64().abs()).fold(0.0, f64::max)
    }
}

/// splitmix64 finaliser; used to derive independent streams from one seed.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named sub-stream. Independent of call order, so adding or removing a
/// module never shifts the initialisation of the others.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(seed ^ mix64(h))
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Builds parameters under a name prefix, each drawn from its own named stream.
pub struct Init<'s, T> {
    pub store: &'s mut ParamStore<T>,
    pub seed: u64,
    pub prefix: String,
}

impl<'s, T: Scalar> Init<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64, prefix: impl Into<String>) -> Self {
        Self { store, seed, prefix: prefix.into() }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.full_name(name);
        Init { store: self.store, seed: self.seed, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, decay: bool) -> ParamId {
        let full = self.full_name(name);
        let mut rng = rng_for(self.seed, &full);
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * std)
            })
            .collect();
        self.store.add(full, Mat::from_vec(rows, cols, data), decay)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64, decay: bool) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Mat::filled(rows, cols, T::of(v)), decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_streams_do_not_depend_on_creation_order() {
        let mut a = ParamStore::<f64>::new(StoreKind::Model);
        let mut b = ParamStore::<f64>::new(StoreKind::Model);
        let wa = Init::new(&mut a, 7, "m").normal("w", 2, 3, 1.0, true);
        Init::new(&mut b, 7, "m").normal("other", 4, 4, 1.0, true);
        let wb = Init::new(&mut b, 7, "m").normal("w", 2, 3, 1.0, true);
        assert_eq!(a.get(wa), b.get(wb));
    }

    #[test]
    fn hash_changes_with_any_value() {
        let mut s = ParamStore::<f32>::new(StoreKind::Lm);
        let id = Init::new(&mut s, 1, "x").normal("w", 3, 3, 0.1, true);
        let before = s.content_hash();
        s.get_mut(id).data[4] += 1e-3;
        assert_ne!(before, s.content_hash());
    }
}
