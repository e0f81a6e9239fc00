//! Named parameter registry, layout enumeration and tape binding.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to; freezing policies are
/// expressed over groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token and position embeddings.
    Embedding,
    /// Attention and feed-forward weights of the encoder blocks.
    Backbone,
    /// Layer-norm gains and offsets.
    LayerNorm,
    TaskAdapter,
    AttrAdapter,
    AttrEmbedding,
    /// Embeddings of the prepended attribute tokens (Tokens comparator).
    AttrToken,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Embedding,
        ParamGroup::Backbone,
        ParamGroup::LayerNorm,
        ParamGroup::TaskAdapter,
        ParamGroup::AttrAdapter,
        ParamGroup::AttrEmbedding,
        ParamGroup::AttrToken,
        ParamGroup::Classifier,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// U(−b, b).
    Uniform(f64),
    /// N(0, σ²).
    Normal(f64),
}

impl Init {
    /// U(−1/√fan_in, 1/√fan_in).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter declarations, available without allocating
/// any parameter storage.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    by_name: HashMap<String, ParamId>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        group: ParamGroup,
        init: Init,
    ) -> ParamId {
        let name = name.into();
        let id = ParamId(self.specs.len());
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.into(),
            group,
            init,
        });
        id
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn total_in(&self, groups: &[ParamGroup]) -> usize {
        self.specs
            .iter()
            .filter(|s| groups.contains(&s.group))
            .map(ParamSpec::numel)
            .sum()
    }
}

/// Parameter values for a [`ParamLayout`].
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    layout: ParamLayout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn init<R: Rng + ?Sized>(layout: ParamLayout, rng: &mut R) -> Self {
        let tensors = layout.specs.iter().map(|s| sample(s, rng)).collect();
        Self { layout, tensors }
    }

    /// Like [`ParamStore::init`], but parameters selected by `first` draw
    /// from `rng_a` and the rest from `rng_b`, so either subset can be
    /// reproduced independently of the other.
    pub fn init_split<A: Rng + ?Sized, B: Rng + ?Sized>(
        layout: ParamLayout,
        rng_a: &mut A,
        rng_b: &mut B,
        first: impl Fn(&ParamSpec) -> bool,
    ) -> Self {
        let tensors = layout
            .specs
            .iter()
            .map(|s| {
                if first(s) {
                    sample(s, rng_a)
                } else {
                    sample(s, rng_b)
                }
            })
            .collect();
        Self { layout, tensors }
    }

    pub fn from_tensors(layout: ParamLayout, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != layout.len() {
            return Err(Error::Contract("tensor count does not match layout".into()));
        }
        for (s, t) in layout.specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, found {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { layout, tensors })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.id(name).map(|id| self.get(id))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSpec, &Tensor<T>)> {
        self.layout
            .specs
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (s, t))| (ParamId(i), s, t))
    }

    pub fn named(&self) -> Vec<(&str, &Tensor<T>)> {
        self.layout
            .specs
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| (s.name.as_str(), t))
            .collect()
    }

    /// Overwrites every parameter whose name appears in `named` and passes
    /// `filter`; returns how many were copied.
    pub fn load_named<'a, I>(
        &mut self,
        named: I,
        filter: impl Fn(&ParamSpec) -> bool,
    ) -> Result<usize>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    {
        let mut n = 0;
        for (name, t) in named {
            let Some(id) = self.layout.id(name) else {
                continue;
            };
            let spec = &self.layout.specs[id.0];
            if !filter(spec) {
                continue;
            }
            if spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    spec.shape,
                    t.shape()
                )));
            }
            self.tensors[id.0] = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Order-sensitive FNV-1a digest of the selected parameters' bits.
    pub fn checksum(&self, filter: impl Fn(&ParamSpec) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (s, t) in self.layout.specs.iter().zip(&self.tensors) {
            if !filter(s) {
                continue;
            }
            for b in s.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for &v in t.data() {
                for b in v.to_f64_lossy().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn sample<T: Scalar, R: Rng + ?Sized>(s: &ParamSpec, rng: &mut R) -> Tensor<T> {
    let shape = s.shape.clone();
    match s.init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::Uniform(b) => Tensor::from_fn(shape, |_| c(rng.random_range(-b..=b))),
        Init::Normal(sd) => Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            c(z * sd)
        }),
    }
}

/// A forward pass in progress: a tape plus lazily bound parameters.
pub struct Ctx<'p, T: Scalar> {
    pub tape: Tape<'p, T>,
    store: &'p ParamStore<T>,
    trainable: Option<&'p [bool]>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// `trainable[i]` marks parameters that need gradients; `None` tracks none.
    pub fn new(store: &'p ParamStore<T>, trainable: Option<&'p [bool]>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: vec![None; store.tensors.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// The tape node holding parameter `id`, bound on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let grad = self.trainable.is_some_and(|m| m[id.0]);
        let v = self.tape.borrowed(&self.store.tensors[id.0], grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter gradients from a finished backward pass, indexed like the store.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}
