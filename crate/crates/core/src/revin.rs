//! Reversible instance normalization over the time axis.

use crate::decomp::dims3;
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Smallest |gamma| the inverse divides by.
pub const GAMMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Revin {
    /// `(gamma, beta)` of length D; `None` without the learnable affine.
    pub affine: Option<(ParamId, ParamId)>,
    pub eps: f64,
}

/// Per-instance statistics captured by [`Revin::normalize`], each `[B, 1, D]`.
pub struct RevinState<'t, S: Scalar> {
    pub mu: Var<'t, S>,
    pub sigma: Var<'t, S>,
}

impl Revin {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, dim: usize, eps: f64, affine: bool) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("revin eps must be positive, got {eps}")));
        }
        let affine = affine.then(|| {
            (
                store.add("revin.gamma", Tensor::ones(&[dim])),
                store.add("revin.beta", Tensor::zeros(&[dim])),
            )
        });
        Ok(Revin { affine, eps })
    }

    pub fn normalize<'t, S: Scalar>(
        &self,
        f: &Forward<'t, S>,
        x: Var<'t, S>,
    ) -> Result<(Var<'t, S>, RevinState<'t, S>)> {
        normalize(x, self.bind(f), self.eps)
    }

    pub fn denormalize<'t, S: Scalar>(
        &self,
        f: &Forward<'t, S>,
        y: Var<'t, S>,
        state: &RevinState<'t, S>,
    ) -> Result<Var<'t, S>> {
        denormalize(y, self.bind(f), state)
    }

    fn bind<'t, S: Scalar>(&self, f: &Forward<'t, S>) -> Option<(Var<'t, S>, Var<'t, S>)> {
        self.affine.map(|(g, b)| (f.param(g), f.param(b)))
    }
}

/// Standardize each (instance, channel) over time, then apply the optional
/// per-channel `(gamma, beta)`.
pub fn normalize<'t, S: Scalar>(
    x: Var<'t, S>,
    affine: Option<(Var<'t, S>, Var<'t, S>)>,
    eps: f64,
) -> Result<(Var<'t, S>, RevinState<'t, S>)> {
    let (_, l, _) = dims3("revin", &x.shape())?;
    if l < 2 {
        return Err(Error::InvalidArgument(format!(
            "revin needs at least 2 time steps, got {l}"
        )));
    }
    let mu = x.mean_axis(1)?;
    let centered = x.sub(mu)?;
    let var = centered.square().mean_axis(1)?;
    let sigma = var.add_scalar(S::lit(eps)).sqrt();
    let mut y = centered.div(sigma)?;
    if let Some((gamma, beta)) = affine {
        y = y.mul(gamma)?.add(beta)?;
    }
    Ok((y, RevinState { mu, sigma }))
}

/// `((y - beta) / gamma) * sigma + mu`, with |gamma| kept at or above
/// [`GAMMA_FLOOR`].
pub fn denormalize<'t, S: Scalar>(
    y: Var<'t, S>,
    affine: Option<(Var<'t, S>, Var<'t, S>)>,
    state: &RevinState<'t, S>,
) -> Result<Var<'t, S>> {
    let mut y = y;
    if let Some((gamma, beta)) = affine {
        let g = gamma.clamp_abs_min(S::lit(GAMMA_FLOOR));
        y = y.sub(beta)?.div(g)?;
    }
    y.mul(state.sigma)?.add(state.mu)
}
