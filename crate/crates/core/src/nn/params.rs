use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tensor};
use crate::{Error, Real, Result};

/// How a parameter tensor is filled at construction.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// `U(−√(6/fan_in), √(6/fan_in))`.
    HeUniform { fan_in: usize },
    /// `U(−bound, bound)`.
    Uniform { bound: Real },
    Constant(Real),
    /// LSTM bias laid out `[i, f, g, o]`: 1.0 on the forget block, 0 elsewhere.
    ForgetBias { hidden: usize },
}

/// Declarative description of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics and the like: stored and checkpointed, never
    /// updated by the optimizer.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Real) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Constant(value),
            trainable: false,
        }
    }
}

/// Named parameters in a deterministic (lexicographic) order.
///
/// Trainable entries are leaves with `requires_grad`; buffers are not.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` defined twice")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    /// Total scalar count of the trainable entries.
    pub fn param_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar count of trainable entries whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Moves every entry of `other` in; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, t) in other.entries {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// A copy with `name` swapped for `tensor` (same shape). Storage is
    /// shared, so this is cheap; used to probe one parameter at a time.
    pub fn with_replaced(&self, name: &str, tensor: Tensor) -> Result<ParamStore> {
        let mut copy = self.clone();
        let slot = copy.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "`{name}` is {:?}, replacement is {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(copy)
    }

    /// Replaces a buffer's contents (shape must match).
    pub fn set_data(&mut self, name: &str, values: &[Real]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.numel() != values.len() {
            return Err(Error::shape(format!(
                "`{name}` has {} values, got {}",
                t.numel(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Gradients of `grads` keyed by parameter name (trainable entries that
    /// received one).
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<Real>> {
        self.trainable()
            .filter_map(|(n, t)| grads.get_id(t.id()).map(|g| (n.to_string(), g.to_vec())))
            .collect()
    }

    /// SHA-256 over names, shapes and values; equal stores hash equal.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v as f64).to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// True when both stores hold the same names, shapes and bit patterns.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, x), (b, y))| {
                a == b
                    && x.shape() == y.shape()
                    && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

/// Builds a store from specs with a ChaCha stream derived from `seed`.
/// Specs are filled in the order given, so the same list and seed always
/// produce a bit-identical store.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<Real> = match spec.init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound) as Real).collect()
            }
            Init::Uniform { bound } => {
                let bound = bound as f64;
                (0..n).map(|_| rng.gen_range(-bound..bound) as Real).collect()
            }
            Init::Constant(v) => vec![v; n],
            Init::ForgetBias { hidden } => {
                if n != 4 * hidden {
                    return Err(Error::shape(format!(
                        "forget-gate bias `{}` must have 4×{hidden} values",
                        spec.name
                    )));
                }
                (0..n)
                    .map(|i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        store.insert(
            spec.name.clone(),
            Tensor::new(&spec.shape, data, spec.trainable)?,
        )?;
    }
    Ok(store)
}

/// Trainable scalar count described by `specs`, without allocating them.
pub fn count_params(specs: &[ParamSpec]) -> usize {
    specs
        .iter()
        .filter(|s| s.trainable)
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}
