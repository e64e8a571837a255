//! Named parameter storage with a frozen/trainable partition.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

/// Ordered map of named parameters. Ordering is part of the contract: every
/// traversal (gradient reduction, checkpointing, optimizer state) walks the
/// map in name order so results are reproducible.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

/// Disjoint split of parameter names into frozen and trainable sets.
#[derive(Clone, Debug, Default)]
pub struct ParamPartition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

impl ParamPartition {
    pub fn is_disjoint_and_covering(&self, set: &ParamSet) -> bool {
        let mut names: Vec<&String> = self.frozen.iter().chain(self.trainable.iter()).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        names.len() == before
            && names.len() == set.len()
            && names.iter().all(|n| set.get(n).is_some())
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        let name = name.into();
        debug_assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.entries.insert(name, Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn merge(&mut self, other: ParamSet) {
        for (name, param) in other.entries {
            debug_assert!(
                !self.entries.contains_key(&name),
                "duplicate parameter `{name}` in merge"
            );
            self.entries.insert(name, param);
        }
    }

    pub fn partition(&self) -> ParamPartition {
        let mut partition = ParamPartition::default();
        for (name, param) in &self.entries {
            if param.trainable {
                partition.trainable.push(name.clone());
            } else {
                partition.frozen.push(name.clone());
            }
        }
        partition
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Bit patterns of every frozen parameter, for bitwise-unchanged checks.
    pub fn frozen_bits(&self) -> BTreeMap<String, Vec<u64>> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(name, p)| {
                (
                    name.clone(),
                    p.value.as_slice().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }
}

/// Fraction of model parameter elements that are trainable under `partition`.
pub fn trainable_param_fraction(partition: &ParamPartition, set: &ParamSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Degenerate(
            "trainable_param_fraction on an empty model".into(),
        ));
    }
    let trainable: usize = partition
        .trainable
        .iter()
        .map(|name| set.value(name).len())
        .sum();
    Ok(trainable as f64 / set.total_elements() as f64)
}

/// Binds parameters onto a tape, one leaf per name, caching the handle so a
/// parameter used twice in a forward pass accumulates its gradient on a
/// single leaf.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    bound: std::cell::RefCell<BTreeMap<String, usize>>,
    vars: std::cell::RefCell<Vec<(String, Var<'t>)>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Binder {
            tape,
            params,
            bound: std::cell::RefCell::new(BTreeMap::new()),
            vars: std::cell::RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Leaf var for a named parameter.
    pub fn var(&self, name: &str) -> Var<'t> {
        if let Some(&slot) = self.bound.borrow().get(name) {
            return self.vars.borrow()[slot].1;
        }
        let var = self.tape.leaf(self.params.value(name).clone());
        let mut vars = self.vars.borrow_mut();
        vars.push((name.to_string(), var));
        self.bound
            .borrow_mut()
            .insert(name.to_string(), vars.len() - 1);
        var
    }

    /// Constant leaf (not a parameter; gradients discarded).
    pub fn constant(&self, value: Matrix) -> Var<'t> {
        self.tape.leaf(value)
    }

    /// Gradients of all bound *trainable* parameters, keyed by name.
    pub fn trainable_grads(
        &self,
        grads: &crate::autodiff::Gradients,
    ) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.borrow().iter() {
            if self.params.value(name).len() == 0 {
                continue;
            }
            let param = self.params.get(name).expect("bound param exists");
            if !param.trainable {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
