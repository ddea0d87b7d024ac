use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::NnError;
use crate::autodiff::{Gradients, Tape, Tensor, Var};

/// Component a trainable tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    /// Recurrent core and the data/latent encoders.
    Theta,
    /// Transition prior network.
    Omega,
    /// Emission network.
    Phi,
    /// Proposal (approximate posterior) network.
    Tau,
    /// Critic.
    Eta,
}

impl Tag {
    pub const ALL: [Tag; 5] = [Tag::Theta, Tag::Omega, Tag::Phi, Tag::Tau, Tag::Eta];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Theta => "theta",
            Tag::Omega => "omega",
            Tag::Phi => "phi",
            Tag::Tau => "tau",
            Tag::Eta => "eta",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Tag::Theta => "θ",
            Tag::Omega => "ω",
            Tag::Phi => "φ",
            Tag::Tau => "τ",
            Tag::Eta => "η",
        }
    }

    pub fn from_name(s: &str) -> Option<Tag> {
        Tag::ALL
            .into_iter()
            .find(|t| t.name() == s || t.symbol() == s)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TagSet(u8);

impl TagSet {
    pub const EMPTY: TagSet = TagSet(0);

    pub fn of(tags: &[Tag]) -> Self {
        TagSet(tags.iter().fold(0, |acc, t| acc | t.bit()))
    }

    pub fn all() -> Self {
        Self::of(&Tag::ALL)
    }

    pub fn contains(self, tag: Tag) -> bool {
        self.0 & tag.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Tag> {
        Tag::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: Tag,
    pub kind: ParamKind,
    pub value: Tensor,
    /// RMSProp second-moment accumulator.
    pub acc: Tensor,
}

/// Named parameters grouped by component tag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-initialised tensor.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        tag: Tag,
        shape: &[usize],
        kind: ParamKind,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(NnError::InvalidName(name));
        }
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tag,
            kind,
            value: Tensor::zeros(shape),
            acc: Tensor::zeros(shape),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of scalar entries carrying `tag`.
    pub fn count(&self, tag: Tag) -> usize {
        self.params
            .iter()
            .filter(|p| p.tag == tag)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn tags(&self) -> TagSet {
        TagSet(self.params.iter().fold(0, |acc, p| acc | p.tag.bit()))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Xavier-uniform weights, zero biases, fresh optimizer state.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            p.acc = Tensor::zeros(p.value.shape());
            match p.kind {
                ParamKind::Bias => p.value = Tensor::zeros(p.value.shape()),
                ParamKind::Weight { fan_in, fan_out } => {
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
                    p.value
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = dist.sample(&mut rng));
                }
            }
        }
    }

    /// Places every parameter on `tape`; those whose tag is in `grad_tags`
    /// become differentiable leaves.
    pub fn bind(&self, tape: &mut Tape, grad_tags: TagSet) -> Binding {
        let live = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), grad_tags.contains(p.tag)))
            .collect();
        Binding {
            live,
            frozen: Vec::new(),
            grad_tags,
        }
    }

    /// Like [`bind`](Self::bind), and additionally places constant copies of
    /// every parameter tagged in `frozen_tags`, read from `frozen_source`
    /// (normally `self`). Networks evaluated through [`Binding::frozen`] see
    /// those constants.
    pub fn bind_with_frozen(
        &self,
        tape: &mut Tape,
        grad_tags: TagSet,
        frozen_tags: TagSet,
        frozen_source: &ParameterStore,
    ) -> Binding {
        let mut b = self.bind(tape, grad_tags);
        b.frozen = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                frozen_tags
                    .contains(p.tag)
                    .then(|| tape.constant(frozen_source.params[i].value.clone()))
            })
            .collect();
        b
    }
}

/// Tape handles for the parameters of one store during one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    live: Vec<Var>,
    frozen: Vec<Option<Var>>,
    grad_tags: TagSet,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.live[id.0]
    }

    pub fn has_frozen(&self) -> bool {
        self.frozen.iter().any(Option::is_some)
    }

    /// A view in which parameters with a frozen copy resolve to that copy.
    pub fn frozen(&self) -> Binding {
        let live = self
            .live
            .iter()
            .enumerate()
            .map(|(i, &v)| self.frozen.get(i).copied().flatten().unwrap_or(v))
            .collect();
        Binding {
            live,
            frozen: Vec::new(),
            grad_tags: self.grad_tags,
        }
    }

    /// Gradients for every differentiable parameter, keyed by name. Parameters
    /// that did not influence the loss get an all-zero gradient.
    pub fn collect(&self, store: &ParameterStore, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (p, &v) in store.params.iter().zip(&self.live) {
            if !self.grad_tags.contains(p.tag) {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out.insert(p.name.clone(), g);
        }
        out
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: HashMap<String, Tensor>,
}

impl ParamGrads {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn extend(&mut self, other: ParamGrads) {
        self.grads.extend(other.grads);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    /// Largest absolute gradient entry over parameters of `store` tagged `tag`.
    pub fn max_abs(&self, store: &ParameterStore, tag: Tag) -> f64 {
        store
            .iter()
            .filter(|p| p.tag == tag)
            .filter_map(|p| self.grads.get(&p.name))
            .map(Tensor::max_abs)
            .fold(0.0, f64::max)
    }
}
