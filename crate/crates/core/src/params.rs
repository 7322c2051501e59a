//! Named parameter storage and the per-forward binding context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Flat, insertion-ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Initialization schemes used by [`ParamStore::init`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Inserts a parameter drawn from `init`. The random stream depends on
    /// `(seed, name)` only, so construction order does not change values.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Const(c) => Tensor::full(shape, T::c(c)),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                Tensor::from_fn(shape, |_| T::c(rng.random_range(-bound..bound)))
            }
        };
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes every parameter, then unfreezes those whose name starts with
    /// one of `trainable_prefixes`.
    pub fn train_only(&mut self, trainable_prefixes: &[&str]) {
        for e in &mut self.entries {
            e.frozen = !trainable_prefixes.iter().any(|p| e.name.starts_with(p));
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Removes every parameter whose name starts with `prefix`. Ids handed
    /// out earlier are invalidated.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|e| !e.name.starts_with(prefix));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }
}

/// Forward-pass context: binds store parameters to graph leaves (once per
/// parameter) and optionally records named intermediates for inspection.
pub struct Ctx<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    grad: bool,
    bound: RefCell<HashMap<ParamId, Var<T>>>,
    probes: Option<RefCell<Vec<(String, Tensor<T>)>>>,
    supports: RefCell<Vec<Vec<bool>>>,
    replay: Option<RefCell<std::vec::IntoIter<Vec<bool>>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Context whose non-frozen parameters require gradients.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            grad: true,
            bound: RefCell::new(HashMap::new()),
            probes: None,
            supports: RefCell::new(Vec::new()),
            replay: None,
        }
    }

    /// Gradient-free context; intermediates are released eagerly.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self {
            grad: false,
            ..Self::train(store)
        }
    }

    pub fn with_probes(mut self) -> Self {
        self.probes = Some(RefCell::new(Vec::new()));
        self
    }

    /// Reuses previously recorded mask supports, in order, instead of
    /// recomputing them; finite differences then see a fixed kept set.
    pub fn with_fixed_supports(mut self, supports: Vec<Vec<bool>>) -> Self {
        self.replay = Some(RefCell::new(supports.into_iter()));
        self
    }

    /// Support of the next selection mask: replayed when fixed, otherwise
    /// computed. Every support used is recorded.
    pub fn support(&self, compute: impl FnOnce() -> Vec<bool>) -> Vec<bool> {
        let keep = self
            .replay
            .as_ref()
            .and_then(|r| r.borrow_mut().next())
            .unwrap_or_else(compute);
        self.supports.borrow_mut().push(keep.clone());
        keep
    }

    pub fn take_supports(&self) -> Vec<Vec<bool>> {
        std::mem::take(&mut *self.supports.borrow_mut())
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return v.clone();
        }
        let requires = self.grad && !self.store.is_frozen(id);
        let v = Var::param(self.store.get(id).clone(), id, requires);
        self.bound.borrow_mut().insert(id, v.clone());
        v
    }

    pub fn probing(&self) -> bool {
        self.probes.is_some()
    }

    pub fn record(&self, name: impl Into<String>, value: &Tensor<T>) {
        if let Some(p) = &self.probes {
            p.borrow_mut().push((name.into(), value.clone()));
        }
    }

    pub fn take_probes(&self) -> Vec<(String, Tensor<T>)> {
        self.probes
            .as_ref()
            .map(|p| std::mem::take(&mut *p.borrow_mut()))
            .unwrap_or_default()
    }
}
