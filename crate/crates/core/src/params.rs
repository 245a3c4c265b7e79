//! Named parameter store shared by models, optimizers, EMA, and checkpoints.
//!
//! Entries keep insertion order, which fixes the iteration order everywhere
//! (optimizer updates, EMA, serialization) and so keeps runs replayable.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{f64_bytes, GradTape, Tensor, Var};

/// Stable handle to one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore<S> {
    entries: Vec<(String, Tensor<S>)>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        ParamStore { entries: self.entries.clone(), by_name: self.by_name.clone() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Insert a trainable tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push((name.to_string(), tensor));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn set_requires_grad_all(&mut self, value: bool) {
        for (_, t) in self.entries.iter_mut() {
            t.requires_grad = value;
        }
    }
}

impl ParamStore<f64> {
    /// Little-endian byte image of every tensor, keyed by name. Used by the
    /// "sigma-fit touches only sigma" byte-diff checks.
    pub fn byte_snapshot(&self) -> Vec<(String, Vec<u8>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), f64_bytes(&t.data))).collect()
    }
}

/// Per-tape binding of parameters to tape leaves. Registering the same
/// parameter twice returns the same leaf, which is what makes cross-layer
/// sharing accumulate adjoints on one node.
pub struct TapeBind {
    vars: Vec<Option<Var>>,
}

impl TapeBind {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        TapeBind { vars: vec![None; store.len()] }
    }

    pub fn var<S: Scalar>(&mut self, tape: &mut GradTape<S>, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(store.get(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Copy gradients computed by `backward` into the parameter tensors.
    pub fn absorb_grads<S: Scalar>(&self, tape: &GradTape<S>, store: &mut ParamStore<S>) {
        for (slot, var) in self.vars.iter().enumerate() {
            let Some(v) = var else { continue };
            if let Some(g) = tape.grad(*v) {
                let g = g.to_vec();
                store.get_mut(ParamId(slot)).accumulate_grad(&g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut store = ParamStore::<f64>::new();
        store.insert("b", Tensor::zeros(&[2]));
        store.insert("a", Tensor::zeros(&[3]));
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(store.total_params(), 5);
    }

    #[test]
    fn bind_returns_one_var_per_param() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::full(&[2], 1.5).with_grad());
        let mut tape = GradTape::new();
        let mut bind = TapeBind::new(&store);
        let v1 = bind.var(&mut tape, &store, id);
        let v2 = bind.var(&mut tape, &store, id);
        assert_eq!(v1, v2);
    }
}
