//! Elementwise arithmetic with trailing-dimension broadcasting.

use super::{broadcast_shape, numel, strides, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

/// Evaluate `f(a, b)` over the broadcast of the two shapes.
pub(crate) fn broadcast_zip<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let n = numel(&out_shape);
    let data: Vec<S> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    } else if ad.len() == 1 {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    } else if out_shape == a.shape() && a.shape().ends_with(b.shape()) {
        let nb = bd.len();
        ad.chunks_exact(nb)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect()
    } else if out_shape == b.shape() && b.shape().ends_with(a.shape()) {
        let na = ad.len();
        bd.chunks_exact(na)
            .flat_map(|row| ad.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let nd = out_shape.len();
        let mut idx = vec![0usize; nd];
        let (mut oa, mut ob) = (0usize, 0usize);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f(ad[oa], bd[ob]));
            for d in (0..nd).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                oa -= sa[d] * idx[d];
                ob -= sb[d] * idx[d];
                idx[d] = 0;
            }
        }
        out
    };
    Ok(Tensor::from_parts(out_shape, data))
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let st = strides(shape);
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                st[i - pad]
            }
        })
        .collect()
}

impl<'t, S: Scalar> Var<'t, S> {
    fn binary(self, other: Var<'t, S>, kind: BinaryKind) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(kind.name(), &a, &b, |x, y| kind.apply(x, y))?;
        Ok(self.tape.custom(&[self, other], out, move |ctx| {
            let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let (ga, gb) = match kind {
                BinaryKind::Add => (g.clone(), g.clone()),
                BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
                BinaryKind::Mul => (
                    broadcast_zip("mul", g, b, |g, y| g * y).expect("shape checked in forward"),
                    broadcast_zip("mul", g, a, |g, x| g * x).expect("shape checked in forward"),
                ),
                BinaryKind::Div => {
                    let ga = broadcast_zip("div", g, b, |g, y| g / y).expect("shape checked in forward");
                    // d(a/b)/db = -out / b
                    let go = g.zip_map(ctx.output, |g, o| -g * o).expect("same shape");
                    let gb = broadcast_zip("div", &go, b, |v, y| v / y).expect("shape checked in forward");
                    (ga, gb)
                }
            };
            vec![
                Some(ga.sum_to_shape(a.shape()).expect("broadcast reduce")),
                Some(gb.sum_to_shape(b.shape()).expect("broadcast reduce")),
            ]
        }))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, BinaryKind::Div)
    }

    /// Apply `f` elementwise; `df(x, y)` is the derivative given input and output.
    pub fn unary(
        self,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Var<'t, S> {
        let out = self.value().map(f);
        self.tape.custom(&[self], out, move |ctx| {
            let x = ctx.input(0).data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), data))]
        })
    }

    pub fn neg(self) -> Var<'t, S> {
        self.unary(|x| -x, |_, _| -S::one())
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        self.unary(move |x| x + c, |_, _| S::one())
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(S::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t, S> {
        self.unary(S::ln, |x, _| S::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.unary(S::sqrt, |_, y| S::lit(0.5) / y)
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(|x| x * x, |x, _| S::lit(2.0) * x)
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t, S> {
        self.unary(S::abs, |x, _| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        })
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(S::tanh, |_, y| S::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(sigmoid, |_, y| y * (S::one() - y))
    }

    pub fn softplus(self) -> Var<'t, S> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// x · sigmoid(x)
    pub fn silu(self) -> Var<'t, S> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, S> {
        self.unary(gelu, gelu_grad)
    }

    /// Push entries with |x| < `floor` out to ±`floor` (0 maps to +`floor`).
    /// Gradient passes through unclamped entries only.
    pub fn clamp_abs_min(self, floor: S) -> Var<'t, S> {
        self.unary(
            move |x| {
                if x.abs() >= floor {
                    x
                } else if x < S::zero() {
                    -floor
                } else {
                    floor
                }
            },
            move |x, _| if x.abs() >= floor { S::one() } else { S::zero() },
        )
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// `y` such that `softplus(y) == x`, for `x > 0`.
pub fn softplus_inverse(x: f64) -> f64 {
    x + (-(-x).exp_m1()).ln()
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + S::lit(GELU_C) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S, _y: S) -> S {
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + S::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (S::one() + S::lit(3.0 * GELU_C) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.var(t(&[2], &[1.0, 2.0]));
        let b = tape.var(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.5, 0.0, -7.25]);
        let a = tape.var(x.clone());
        let ones = tape.constant(Tensor::ones(&[2, 3]));
        assert_eq!(*a.mul(ones).unwrap().value(), x);
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn silu_value_and_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.silu();
        assert_eq!(y.value().item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 0.5);
    }

    #[test]
    fn broadcast_backward_reduces() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        let s = a.mul(b).unwrap().sum_all();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).data(), &[3.0, 5.0, 7.0]);
        assert_eq!(g.get(a).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[4, 1], |i| 10.0 * i as f64);
        let c = broadcast_zip("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.at(&[1, 2, 0]), 3.0 + 20.0);
        assert_eq!(c.at(&[0, 3, 2]), 2.0 + 30.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
