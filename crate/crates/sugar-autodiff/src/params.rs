use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
struct ParamEntry {
    name: String,
    value: ArrayD<f64>,
    trainable: bool,
}

/// Named parameter registry shared by the models. Iteration order is the
/// registration order, which is deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: value.as_standard_layout().to_owned(),
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f64>) {
        self.entries[id.0].value = value.as_standard_layout().to_owned();
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn num_elements(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.value(id).len()).sum()
    }
}

/// Maps parameters to their leaf nodes on one tape, creating each leaf at
/// most once per forward pass.
pub struct Binding {
    slots: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.slots[id.0] {
            return v;
        }
        let value = store.value(id).clone();
        let v = if store.is_trainable(id) {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.slots[id.0] = Some(v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
pub struct GradAccum {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += delta,
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    /// Collect tape gradients for every bound parameter.
    pub fn absorb(&mut self, binding: &Binding, grads: &Gradients) {
        for (id, var) in binding.bound() {
            if let Some(g) = grads.get(var) {
                self.add(id, g);
            }
        }
    }
}

/// Run a forward pass, backpropagate from its scalar loss, and accumulate
/// parameter gradients. Returns the loss value.
pub fn backprop<F>(store: &ParamStore, accum: &mut GradAccum, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &mut Binding) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binding = Binding::new(store);
    let loss = f(&mut tape, &mut binding)?;
    if tape.value(loss).len() != 1 {
        return Err(AutodiffError::InvalidOp(
            "backprop loss must be scalar".into(),
        ));
    }
    let grads = tape.backward(loss)?;
    accum.absorb(&binding, &grads);
    Ok(tape.scalar_value(loss))
}
