use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::{AutogradError, Gradients, Result, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Sets the trainable flag on every entry whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Moves all entries of `other` into this store.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Entries under `prefix`, renamed to start with `new_prefix` instead.
    pub fn renamed(&self, prefix: &str, new_prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix).map(|rest| (format!("{new_prefix}{rest}"), v.clone()))
            })
            .collect();
        ParamStore { entries }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

/// Binds store entries to leaf variables on one tape. Each name is bound at
/// most once, so repeated lookups share a gradient accumulator.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Binder { tape, store, bound: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name).ok_or_else(|| AutogradError::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter. Parameters that did not
    /// influence the root get explicit zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tied_lookups_accumulate() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0), true);
        store.insert("frozen", Tensor::scalar(5.0), false);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let w1 = b.get("w").unwrap();
        let w2 = b.get("w").unwrap();
        let f = b.get("frozen").unwrap();
        let y = w1.mul(w2).unwrap().mul(f).unwrap();
        let g = b.gradients(&tape.backward(y));
        assert_eq!(g["w"].item(), 30.0);
        assert!(!g.contains_key("frozen"));
        assert!(matches!(b.get("missing"), Err(AutogradError::MissingParam(_))));
    }

    #[test]
    fn prefix_helpers() {
        let mut store = ParamStore::new();
        store.insert("a/x", Tensor::zeros(&[2, 2]), true);
        store.insert("a/y", Tensor::zeros(&[3]), true);
        store.insert("b/z", Tensor::zeros(&[1]), true);
        store.set_trainable_prefix("a/", false);
        assert_eq!(store.trainable_count(), 1);
        let r = store.renamed("a/", "c/");
        assert!(r.contains("c/x") && r.contains("c/y") && r.len() == 2);
    }
}
