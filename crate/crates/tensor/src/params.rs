//! Named parameter storage with deterministic iteration order.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Tensor, Var};

/// One named tensor plus its trainable flag.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All model parameters, keyed by dotted path (e.g. `encoder.block0.wq`).
///
/// Backed by a `BTreeMap` so iteration, serialization, and optimizer update
/// order are deterministic across runs.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), Parameter { tensor, trainable: true });
    }

    pub fn insert_frozen(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), Parameter { tensor, trainable: false });
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("no parameter named {name}")).tensor
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("no parameter named {name}")).tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Set the trainable flag for every parameter whose name starts with
    /// `prefix`. Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Enter a stored parameter onto a tape under its own name, honoring its
    /// trainable flag.
    pub fn var(&self, g: &mut Graph, name: &str) -> Var {
        let p = self.entries.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        g.param(name, p.tensor.clone(), p.trainable)
    }

    /// Like [`ParamStore::var`] but forces the leaf to be constant regardless
    /// of the stored flag (used when a whole submodule is held fixed).
    pub fn var_frozen(&self, g: &mut Graph, name: &str) -> Var {
        let p = self.entries.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        g.param(name, p.tensor.clone(), false)
    }

    /// Insert a weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) under a
    /// (seed, name)-derived RNG stream.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = Self::init_rng(seed, name);
        self.insert(name, Tensor::rand_uniform(&mut rng, shape, -bound, bound));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    /// Enter every parameter passing the filter onto the tape, honoring the
    /// stored trainable flags. Call at most once per graph so a shared
    /// parameter is not double-counted in the gradient table.
    pub fn bind_where(&self, g: &mut Graph, pred: impl Fn(&str) -> bool) -> TapeBindings {
        let mut map = BTreeMap::new();
        for (name, p) in &self.entries {
            if pred(name) {
                map.insert(name.clone(), g.param(name, p.tensor.clone(), p.trainable));
            }
        }
        TapeBindings { map }
    }

    pub fn bind(&self, g: &mut Graph) -> TapeBindings {
        self.bind_where(g, |_| true)
    }

    /// Deterministic RNG for initializing the parameter with this name:
    /// stream depends only on (seed, name), not on insertion order.
    pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let bytes = name.as_bytes();
        // Fold the name into the remaining key bytes.
        for (i, &b) in bytes.iter().enumerate() {
            let j = 8 + (i % 24);
            key[j] ^= b.rotate_left((i / 24) as u32);
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Tape handles for a set of bound parameters, looked up by name.
#[derive(Debug, Clone)]
pub struct TapeBindings {
    map: BTreeMap<String, Var>,
}

impl TapeBindings {
    pub fn get(&self, name: &str) -> Var {
        *self.map.get(name).unwrap_or_else(|| panic!("parameter {name} not bound to this tape"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }
}
