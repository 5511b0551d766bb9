use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::{DiffArray, Real};
use super::tape::{Gradients, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub array: DiffArray<T>,
}

/// Named learnable arrays in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, array: DiffArray<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            array: array.with_requires_grad(true),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, DiffArray::zeros(shape))
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, DiffArray::full(shape, T::from_f64(value)))
    }

    /// Normal(0, std) initialisation.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.add(
            name,
            DiffArray::from_vec(shape, data).expect("shape matches generated data"),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &DiffArray<T> {
        &self.entries[id.0].array
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray<T> {
        &mut self.entries[id.0].array
    }

    /// Ids of every parameter in declaration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.array.len()).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self.entries.iter().map(|e| tape.leaf(&e.array)).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|e| tape.constant_array(&e.array))
                .collect(),
        }
    }

    /// Adds the gradients from one backward pass into each parameter.
    pub fn accumulate(&mut self, bound: &BoundParams<'_, T>, grads: &Gradients<T>) {
        for (entry, var) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                entry.array.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.array.zero_grad());
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
pub struct BoundParams<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Replaces one binding, e.g. to differentiate with respect to a copy.
    pub fn set(&mut self, id: ParamId, var: Var<'t, T>) {
        self.vars[id.0] = var;
    }
}
