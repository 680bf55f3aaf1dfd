//! Exponential-moving-average split of a series into trend and seasonal parts.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 0.3;

pub struct Decomposition<'t, S: Scalar> {
    pub trend: Var<'t, S>,
    pub seasonal: Var<'t, S>,
    pub alpha: f64,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("ema alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Causal EMA along axis 1 of a `[B, L, D]` tensor, started at `x[0]`.
///
/// Evaluated as `prev + alpha * (x - prev)` so a constant series stays
/// exactly constant; `alpha == 1` copies the input.
pub fn ema_trend<S: Scalar>(x: &Tensor<S>, alpha: f64) -> Result<Tensor<S>> {
    check_alpha(alpha)?;
    let (b, l, d) = dims3("ema", x.shape())?;
    let src = x.data();
    let mut out = src.to_vec();
    if alpha == 1.0 {
        return Ok(Tensor::from_parts(x.shape().to_vec(), out));
    }
    let a = S::lit(alpha);
    for bi in 0..b {
        let base = bi * l * d;
        for t in 1..l {
            for c in 0..d {
                let i = base + t * d + c;
                let prev = out[i - d];
                out[i] = prev + a * (src[i] - prev);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `trend` from [`ema_trend`] and `seasonal = x - trend`; gradients flow
/// through both parts.
pub fn ema_decompose<'t, S: Scalar>(x: Var<'t, S>, alpha: f64) -> Result<Decomposition<'t, S>> {
    let value = x.value();
    let trend_value = ema_trend(&value, alpha)?;
    let (b, l, d) = dims3("ema", value.shape())?;
    let shape = value.shape().to_vec();
    let (a, keep) = (S::lit(alpha), S::lit(1.0 - alpha));
    let trend = x.tape().custom(&[x], trend_value, move |ctx| {
        // adjoint of trend[t] accumulates g[t] plus the carry from t + 1
        let g = ctx.grad.data();
        let mut gx = vec![S::zero(); g.len()];
        for bi in 0..b {
            let base = bi * l * d;
            for c in 0..d {
                let mut carry = S::zero();
                for t in (0..l).rev() {
                    let i = base + t * d + c;
                    let adj = g[i] + carry;
                    if t == 0 {
                        gx[i] = adj;
                    } else {
                        gx[i] = a * adj;
                        carry = keep * adj;
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(shape.clone(), gx))]
    });
    let seasonal = x.sub(trend)?;
    Ok(Decomposition {
        trend,
        seasonal,
        alpha,
    })
}

pub(crate) fn dims3(op: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, l, d] if l >= 1 => Ok((b, l, d)),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects a [batch, time, channel] tensor, got {shape:?}"
        ))),
    }
}
