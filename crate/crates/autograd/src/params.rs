//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered collection of named tensors.
///
/// Names are hierarchical (`decoder.up0.conv.weight`) and unique within a store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    lookup: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.values[id.0].shape(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.values[id.0] = Rc::new(value);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count of parameters whose names start with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Records every parameter as a leaf on `tape`.
    ///
    /// With `trainable = false` the leaves are constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Binding<'t> {
        self.bind_where(tape, |_| trainable)
    }

    /// Like [`bind`](Self::bind), choosing trainability per parameter name.
    pub fn bind_where<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Binding<'t> {
        let vars = self
            .values
            .iter()
            .zip(&self.names)
            .map(|(v, n)| tape.leaf_rc(Rc::clone(v), trainable(n)))
            .collect();
        Binding { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }
}

/// Parameters of one store recorded on a tape.
pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    /// A binding over caller-made leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order (zeros where nothing flowed).
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_binding_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]));
        let tape = Tape::new();
        let frozen = store.bind(&tape, false);
        let loss = frozen.get(w).sqr().sum();
        let g = tape.backward(loss);
        assert_eq!(frozen.grads(&g)[0].data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let live = store.bind(&tape, true);
        let loss = live.get(w).sqr().sum();
        let g = tape.backward(loss);
        assert_eq!(live.grads(&g)[0].data(), &[2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1]));
        store.add("a", Tensor::zeros(&[1]));
    }
}
