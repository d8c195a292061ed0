//! Named, ordered storage for learnable tensors.

use std::ops::Index;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::rng::{trunc_normal, Rng};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::{Scalar, Tensor};

/// Position of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Insertion-ordered map from unique names to learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let (idx, _) = self.entries.insert_full(name, Param { value, grad: None });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape` as a gradient-collecting leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.entries.values().map(|p| tape.param(p.value.clone())).collect() }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.entries.values().map(|p| tape.constant(p.value.clone())).collect() }
    }

    /// Stores the gradients of a backward pass; parameters the gradient
    /// did not reach get a zero buffer.
    pub fn set_grads(&mut self, bound: &Bound<'_, T>, grads: &mut Gradients<T>) {
        for (param, &var) in self.entries.values_mut().zip(&bound.vars) {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(param.value.shape().to_vec()));
            param.grad = Some(g);
        }
    }

    /// Adds the gradients of a backward pass to the stored ones.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, T>, grads: &mut Gradients<T>) {
        for (param, &var) in self.entries.values_mut().zip(&bound.vars) {
            let Some(g) = grads.take(var) else { continue };
            match &mut param.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Rebinds an existing list of variables, one per store entry in order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }
}

impl<'t, T: Scalar> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    /// Truncated normal with the given standard deviation.
    TruncNormal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

/// Creates parameters under a dotted name prefix.
pub struct Initializer<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

/// Standard deviation of projection weights.
pub const PROJECTION_STD: f64 = 0.02;

impl<'a, T: Scalar> Initializer<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scoped<R>(&mut self, segment: &str, f: impl FnOnce(&mut Initializer<'_, T>) -> Result<R>) -> Result<R> {
        let prefix = if self.prefix.is_empty() { segment.to_string() } else { format!("{}.{segment}", self.prefix) };
        let mut child = Initializer { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<ParamId> {
        let value = match kind {
            InitKind::TruncNormal(std) => trunc_normal(self.rng, shape, std),
            InitKind::Zeros => Tensor::zeros(shape.to_vec()),
            InitKind::Ones => Tensor::ones(shape.to_vec()),
            InitKind::Constant(c) => Tensor::full(shape.to_vec(), T::c(c)),
        };
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value)
    }
}
