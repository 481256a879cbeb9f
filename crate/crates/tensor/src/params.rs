use std::ops::Index;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Array, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not learned (e.g. power-iteration vectors).
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Array,
    kind: ParamKind,
}

/// Named, flat storage for a network's parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, value: Array, kind: ParamKind) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name: name.to_string(), value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Array) -> ParamId {
        self.push(name, value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, value: Array) -> ParamId {
        self.push(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Record every entry on `tape`. Trainable entries become gradient leaves
    /// when `trainable` is set; buffers are always constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable && e.kind == ParamKind::Trainable {
                    tape.var(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }

    /// Copy every same-named, same-shaped value from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| format!("missing parameter {}", e.name))?;
            if src.value.shape() != e.value.shape() {
                return Err(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                ));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array, ParamKind)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.kind))
    }
}

/// Parameters of one store recorded on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    trainable: bool,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients of `loss` for every entry (`None` for buffers and for
    /// parameters the loss does not reach).
    pub fn grads(&self, tape: &'t Tape, loss: Var<'t>) -> Vec<Option<Array>> {
        if !self.trainable {
            return vec![None; self.vars.len()];
        }
        tape.grad(loss, &self.vars, false)
            .into_iter()
            .map(|g| g.map(|v| (*v.value()).clone()))
            .collect()
    }
}

/// Gradients of `loss` for several bound stores from a single backward pass.
pub fn joint_grads<'t>(tape: &'t Tape, loss: Var<'t>, bounds: &[&Bound<'t>]) -> Vec<Vec<Option<Array>>> {
    let wrt: Vec<Var<'t>> = bounds.iter().filter(|b| b.trainable).flat_map(|b| b.vars.iter().copied()).collect();
    let mut flat = tape.grad(loss, &wrt, false).into_iter();
    bounds
        .iter()
        .map(|b| {
            if !b.trainable {
                return vec![None; b.vars.len()];
            }
            flat.by_ref().take(b.vars.len()).map(|g| g.map(|v| (*v.value()).clone())).collect()
        })
        .collect()
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Normal(0, std) initialised array.
pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> Array {
    Array::zeros(IxDyn(shape))
}
