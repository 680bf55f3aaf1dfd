//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Flat, ordered collection of every trainable array of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameter names with shapes, in registration order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn values(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor<S>>) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "shape change for {}", p.name);
            p.value = v;
        }
    }
}

/// Parameters of a store registered as leaves of one tape, created lazily.
pub struct ParamBinding<'t, S: Scalar> {
    tape: &'t Tape<S>,
    store: &'t ParamStore<S>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t, S>>>>,
}

impl<'t, S: Scalar> ParamBinding<'t, S> {
    /// With `trainable == false` parameters enter the tape as constants and no
    /// backward rules are kept.
    pub fn new(tape: &'t Tape<S>, store: &'t ParamStore<S>, trainable: bool) -> Self {
        ParamBinding {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, S> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.var(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Gradients aligned with the store; zeros for parameters not used.
    pub fn gradients(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        let vars = self.vars.borrow();
        vars.iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) => grads.get(*v),
                None => Tensor::zeros(self.store.params[i].value.shape()),
            })
            .collect()
    }
}

pub(crate) fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..=bound)))
}
