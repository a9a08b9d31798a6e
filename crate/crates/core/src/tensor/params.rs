use super::graph::Graph;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Plain SGD on every trainable parameter bound to `graph`. Frozen
    /// parameters are never written.
    pub fn sgd_step(&mut self, graph: &Graph<S>, lr: f64) {
        let lr = S::of(lr);
        for &(id, var) in graph.bound_params() {
            let entry = &mut self.entries[id.0];
            if !entry.trainable {
                continue;
            }
            if let Some(grad) = graph.grad(var) {
                for (w, &g) in entry.value.data_mut().iter_mut().zip(grad) {
                    *w = *w - lr * g;
                }
            }
        }
    }

    pub fn snapshot(&self) -> Snapshot<S> {
        Snapshot {
            entries: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Snapshot restricted to parameters whose names satisfy `keep`.
    pub fn snapshot_where(&self, keep: impl Fn(&ParamEntry<S>) -> bool) -> Snapshot<S> {
        Snapshot {
            entries: self
                .entries
                .iter()
                .filter(|e| keep(e))
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Overwrites every parameter from a snapshot with the same names and
    /// shapes, in the same order.
    pub fn load_snapshot(&mut self, snap: &Snapshot<S>) -> Result<()> {
        if snap.entries.len() != self.entries.len() {
            return Err(Error::Snapshot(format!(
                "snapshot has {} tensors, store has {}",
                snap.entries.len(),
                self.entries.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(&snap.entries) {
            if &entry.name != name || entry.value.shape() != value.shape() {
                return Err(Error::Snapshot(format!(
                    "expected {} {:?}, found {} {:?}",
                    entry.name,
                    entry.value.shape(),
                    name,
                    value.shape()
                )));
            }
            entry.value = value.clone();
        }
        Ok(())
    }
}

/// Named copy of parameter values at one point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<S> {
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Real> Snapshot<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}
