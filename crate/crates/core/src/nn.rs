//! Small building blocks shared by the forecasting heads.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, ParamBinding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// State of one forward pass: the tape, bound parameters, mode and dropout RNG.
pub struct Forward<'t, S: Scalar> {
    pub params: ParamBinding<'t, S>,
    /// Enables dropout.
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t, S: Scalar> Forward<'t, S> {
    /// Training passes record parameter gradients and apply dropout;
    /// evaluation passes do neither.
    pub fn new(tape: &'t Tape<S>, store: &'t ParamStore<S>, train: bool, rng: ChaCha8Rng) -> Self {
        Forward {
            params: ParamBinding::new(tape, store, train),
            train,
            rng: RefCell::new(rng),
        }
    }

    /// Parameter gradients without dropout, for gradient checking.
    pub fn deterministic(tape: &'t Tape<S>, store: &'t ParamStore<S>) -> Self {
        Forward {
            params: ParamBinding::new(tape, store, true),
            train: false,
            rng: RefCell::new(rand::SeedableRng::seed_from_u64(0)),
        }
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.params.tape()
    }

    pub fn param(&self, id: ParamId) -> Var<'t, S> {
        self.params.get(id)
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'t, S> {
        self.tape().constant(t)
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1 / (1 - rate)`. Identity outside training or when `rate == 0`.
    pub fn dropout(&self, x: Var<'t, S>, rate: f64) -> Result<Var<'t, S>> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = S::lit(1.0 / keep);
        let shape = x.shape();
        let mut rng = self.rng.borrow_mut();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                S::zero()
            }
        });
        x.mul(self.tape().constant(mask))
    }
}

/// Affine map over the last axis: `x · W + b`, `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in ±1/sqrt(in_dim) for weights and bias.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound)));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn from_tensors<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
    ) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::InvalidArgument(format!(
                "linear weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            if b.shape() != [out_dim] {
                return Err(Error::shape("linear bias", weight.shape(), b.shape()));
            }
        }
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b));
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.matmul(f.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(f.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layer_norm(f.param(self.gamma), f.param(self.beta), S::lit(self.eps))
    }
}
