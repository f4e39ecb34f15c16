use std::cell::RefCell;
use std::collections::HashMap;

use super::array::{Array, Precision};
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every trainable array of a model under a stable, unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which would make
    /// checkpoints ambiguous.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    /// Mutable view of every value; shapes must be preserved by the caller.
    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    /// Replaces every value, checking names and shapes line up.
    pub fn set_values(&mut self, values: Vec<Array>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape(
                "ParamStore::set_values",
                format!("{} arrays for {} parameters", values.len(), self.values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::shape(
                    "ParamStore::set_values",
                    format!("{}: {:?} vs {:?}", self.names[i], v.shape(), self.values[i].shape()),
                ));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn round_to(&mut self, precision: Precision) {
        for v in &mut self.values {
            precision.round_slice(v.data_mut());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }
}

enum Source<'a> {
    Store { store: &'a ParamStore, trainable: bool },
    Vars(&'a [Var]),
}

/// Lazily registers parameters on a tape the first time a forward pass asks
/// for them, so parameters that do not participate never become leaves.
pub struct Binding<'a> {
    tape: &'a Tape,
    source: Source<'a>,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'a> Binding<'a> {
    /// Parameters become differentiable leaves.
    pub fn trainable(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::from_store(tape, store, true)
    }

    /// Parameters become constants (evaluation only).
    pub fn frozen(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::from_store(tape, store, false)
    }

    fn from_store(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Binding {
            tape,
            source: Source::Store { store, trainable },
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Uses already-registered variables, one per parameter id.
    pub fn with_vars(tape: &'a Tape, vars: &'a [Var]) -> Self {
        Binding {
            tape,
            source: Source::Vars(vars),
            vars: RefCell::new(vec![None; vars.len()]),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let v = match &self.source {
            Source::Store { store, trainable } => self.tape.leaf(store.get(id).clone(), *trainable),
            Source::Vars(vars) => vars[id.0],
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars.borrow()[id.0].is_some()
    }

    /// Per-parameter gradients; `None` for parameters never used.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Array>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
