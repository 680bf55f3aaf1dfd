//! Zero-order-hold discretization and the selective state-space scan.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// `(A_bar, B_bar)` for one diagonal entry: `exp(delta * a)` and
/// `(exp(delta * a) - 1) / a * b`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let (abar, factor) = zoh(a, delta);
    Ok((abar, factor * b))
}

/// `exp(x)` and `delta * expm1(x) / x` with `x = delta * a`, plus `expm1(x)`.
/// One transcendental per call: whichever of the two is computed directly,
/// the other follows from it without losing relative accuracy.
#[inline]
fn zoh_parts<S: Scalar>(a: S, delta: S) -> (S, S, S) {
    let x = delta * a;
    let (ex, em1) = if x < S::lit(-0.5) {
        let ex = x.exp();
        (ex, ex - S::one())
    } else {
        let em1 = x.exp_m1();
        (em1 + S::one(), em1)
    };
    let factor = if x.abs() < S::lit(1e-6) {
        // series limit; expm1(x) / x = 1 + x / 2 + O(x^2)
        delta * (S::one() + x * S::lit(0.5))
    } else {
        delta * em1 / x
    };
    (ex, factor, em1)
}

#[inline]
pub(crate) fn zoh<S: Scalar>(a: S, delta: S) -> (S, S) {
    let (abar, factor, _) = zoh_parts(a, delta);
    (abar, factor)
}

/// `(x e^x - e^x + 1) / x^2`, the derivative of `expm1(x) / x`, given
/// `e^x` and `expm1(x)`.
#[inline]
fn zoh_factor_slope<S: Scalar>(x: S, ex: S, em1: S) -> S {
    if x.abs() < S::lit(1e-3) {
        S::lit(0.5) + x * (S::lit(1.0 / 3.0) + x * (S::lit(0.125) + x * S::lit(1.0 / 30.0)))
    } else {
        (x * ex - em1) / (x * x)
    }
}

struct ScanDims {
    batch: usize,
    tokens: usize,
    inner: usize,
    state: usize,
}

fn scan_dims(u: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize], d: &[usize]) -> Result<ScanDims> {
    let [batch, tokens, inner] = *u else {
        return Err(Error::InvalidArgument(format!("scan input must be 3-D, got {u:?}")));
    };
    if delta != u {
        return Err(Error::shape("scan delta", u, delta));
    }
    let [ai, state] = *a else {
        return Err(Error::InvalidArgument(format!("scan A must be 2-D, got {a:?}")));
    };
    if ai != inner {
        return Err(Error::shape("scan A", u, a));
    }
    let bc = [batch, tokens, state];
    if b != bc {
        return Err(Error::shape("scan B", &bc, b));
    }
    if c != bc {
        return Err(Error::shape("scan C", &bc, c));
    }
    if d != [inner] {
        return Err(Error::shape("scan D", &[inner], d));
    }
    Ok(ScanDims {
        batch,
        tokens,
        inner,
        state,
    })
}

/// Run `h_t = A_bar_t h_{t-1} + B_bar_t u_t`, `y_t = C_t h_t + D u_t` over
/// axis 1 with `h_0 = 0`, discretizing per token with the given `delta`.
///
/// Shapes: `u, delta: [B, K, E]`, `a: [E, N]` (the continuous, negative
/// diagonal), `b, c: [B, K, N]`, `d: [E]`. Output is `[B, K, E]`.
pub fn selective_scan<'t, S: Scalar>(
    u: Var<'t, S>,
    delta: Var<'t, S>,
    a: Var<'t, S>,
    b: Var<'t, S>,
    c: Var<'t, S>,
    d: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (uv, dv, av, bv, cv, skip) = (u.value(), delta.value(), a.value(), b.value(), c.value(), d.value());
    let dims = scan_dims(uv.shape(), dv.shape(), av.shape(), bv.shape(), cv.shape(), skip.shape())?;
    let y = scan_forward(&dims, uv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
    let out = Tensor::from_parts(uv.shape().to_vec(), y);
    Ok(u.tape().custom(&[u, delta, a, b, c, d], out, move |ctx| {
        let grads = scan_backward(
            &dims,
            ctx.input(0).data(),
            ctx.input(1).data(),
            ctx.input(2).data(),
            ctx.input(3).data(),
            ctx.input(4).data(),
            ctx.input(5).data(),
            ctx.grad.data(),
        );
        grads
            .into_iter()
            .zip(ctx.inputs)
            .map(|(g, x)| Some(Tensor::from_parts(x.shape().to_vec(), g)))
            .collect()
    }))
}

fn scan_forward<S: Scalar>(dims: &ScanDims, u: &[S], delta: &[S], a: &[S], b: &[S], c: &[S], d: &[S]) -> Vec<S> {
    let ScanDims {
        batch,
        tokens,
        inner,
        state,
    } = *dims;
    let mut y = vec![S::zero(); u.len()];
    let mut h = vec![S::zero(); state];
    for bi in 0..batch {
        for e in 0..inner {
            h.iter_mut().for_each(|v| *v = S::zero());
            let arow = &a[e * state..(e + 1) * state];
            for t in 0..tokens {
                let i = (bi * tokens + t) * inner + e;
                let bc = (bi * tokens + t) * state;
                let (ut, dt) = (u[i], delta[i]);
                let mut acc = d[e] * ut;
                for n in 0..state {
                    let (abar, factor) = zoh(arow[n], dt);
                    h[n] = abar * h[n] + factor * b[bc + n] * ut;
                    acc = acc + c[bc + n] * h[n];
                }
                y[i] = acc;
            }
        }
    }
    y
}

/// Gradients for `(u, delta, a, b, c, d)`. States are recomputed per
/// `(batch, channel)` lane and then swept in reverse.
#[allow(clippy::too_many_arguments)]
fn scan_backward<S: Scalar>(
    dims: &ScanDims,
    u: &[S],
    delta: &[S],
    a: &[S],
    b: &[S],
    c: &[S],
    d: &[S],
    gy: &[S],
) -> [Vec<S>; 6] {
    let ScanDims {
        batch,
        tokens,
        inner,
        state,
    } = *dims;
    let mut gu = vec![S::zero(); u.len()];
    let mut gdelta = vec![S::zero(); u.len()];
    let mut ga = vec![S::zero(); a.len()];
    let mut gb = vec![S::zero(); b.len()];
    let mut gc = vec![S::zero(); c.len()];
    let mut gd = vec![S::zero(); d.len()];
    // h_t for every token of one lane, plus the discretized coefficients
    let mut hs = vec![S::zero(); tokens * state];
    let mut abars = vec![S::zero(); tokens * state];
    let mut factors = vec![S::zero(); tokens * state];
    let mut em1s = vec![S::zero(); tokens * state];
    let mut dh = vec![S::zero(); state];
    for bi in 0..batch {
        for e in 0..inner {
            let arow = &a[e * state..(e + 1) * state];
            for t in 0..tokens {
                let i = (bi * tokens + t) * inner + e;
                let bc = (bi * tokens + t) * state;
                for n in 0..state {
                    let (abar, factor, em1) = zoh_parts(arow[n], delta[i]);
                    let prev = if t == 0 { S::zero() } else { hs[(t - 1) * state + n] };
                    hs[t * state + n] = abar * prev + factor * b[bc + n] * u[i];
                    abars[t * state + n] = abar;
                    factors[t * state + n] = factor;
                    em1s[t * state + n] = em1;
                }
            }
            dh.iter_mut().for_each(|v| *v = S::zero());
            for t in (0..tokens).rev() {
                let i = (bi * tokens + t) * inner + e;
                let bc = (bi * tokens + t) * state;
                let (ut, dt, g) = (u[i], delta[i], gy[i]);
                gd[e] = gd[e] + g * ut;
                let mut gut = g * d[e];
                let mut gdt = S::zero();
                for n in 0..state {
                    let k = t * state + n;
                    let prev = if t == 0 { S::zero() } else { hs[k - state] };
                    gc[bc + n] = gc[bc + n] + g * hs[k];
                    let adj = dh[n] + g * c[bc + n];
                    let (abar, factor, an) = (abars[k], factors[k], arow[n]);
                    let g_abar = adj * prev;
                    let g_factor = adj * b[bc + n] * ut;
                    gb[bc + n] = gb[bc + n] + adj * factor * ut;
                    gut = gut + adj * factor * b[bc + n];
                    // d abar = abar (a d delta + delta d a); d factor / d delta = abar
                    gdt = gdt + g_abar * an * abar + g_factor * abar;
                    let x = dt * an;
                    ga[e * state + n] = ga[e * state + n] + g_abar * dt * abar + g_factor * dt * dt * zoh_factor_slope(x, abar, em1s[k]);
                    dh[n] = adj * abar;
                }
                gu[i] = gu[i] + gut;
                gdelta[i] = gdelta[i] + gdt;
            }
        }
    }
    [gu, gdelta, ga, gb, gc, gd]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_reference_values() {
        let (abar, bbar) = zoh_discretize(-1.0, 1.0, 0.1).unwrap();
        assert!((abar - 0.904_837_418_035_959_6).abs() < 1e-12);
        assert!((bbar - 0.095_162_581_964_040_43).abs() < 1e-12);
        let (abar, _) = zoh_discretize(-2.0, 1.0, 0.5).unwrap();
        assert!((abar - (-1.0f64).exp()).abs() < 1e-15);
        let (abar, bbar) = zoh_discretize(0.0, 1.0, 0.1).unwrap();
        assert_eq!((abar, bbar), (1.0, 0.1));
        assert!(zoh_discretize(-1.0, 1.0, 0.0).is_err());
        assert!(zoh_discretize(-1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn small_delta_is_first_order() {
        let (a, b) = (-3.0, 0.7);
        for delta in [1e-3, 5e-4, 1e-4, 1e-5] {
            let (_, bbar) = zoh_discretize(a, b, delta).unwrap();
            assert!((bbar - delta * b).abs() <= 2.0 * delta * delta, "{delta}");
        }
    }

    #[test]
    fn slope_series_meets_closed_form() {
        for x in [-2e-3f64, -1.001e-3, 1.001e-3, 5e-3] {
            let closed = (x * x.exp() - x.exp_m1()) / (x * x);
            let series = 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
            assert!((closed - series).abs() < 1e-11, "{x}");
        }
    }

    fn run(u: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64], dims: [usize; 4]) -> Vec<f64> {
        let [bt, k, e, n] = dims;
        let tape = Tape::<f64>::new();
        let t = |s: &[usize], v: &[f64]| tape.constant(Tensor::from_f64(s, v).unwrap());
        selective_scan(
            t(&[bt, k, e], u),
            t(&[bt, k, e], delta),
            t(&[e, n], a),
            t(&[bt, k, n], b),
            t(&[bt, k, n], c),
            t(&[e], d),
        )
        .unwrap()
        .value()
        .to_f64_vec()
    }

    #[test]
    fn scalar_unrolled_example() {
        // A_bar = 0.5 and B_bar = 1 come from delta = 1, a = ln 0.5, b = a / (0.5 - 1)
        let a = 0.5f64.ln();
        let b = a / (0.5 - 1.0);
        let y = run(&[1.0, 1.0], &[1.0, 1.0], &[a], &[b, b], &[1.0, 1.0], &[0.0], [1, 2, 1, 1]);
        assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] - 1.5).abs() < 1e-15, "{y:?}");
    }

    #[test]
    fn memoryless_when_a_bar_vanishes() {
        // exp(-800) underflows to zero
        let u = [0.5, -1.0, 2.0];
        let y = run(&u, &[1.0; 3], &[-800.0], &[2.0, 3.0, 4.0], &[1.5, 1.0, -1.0], &[0.0], [1, 3, 1, 1]);
        let factor = 1.0 / 800.0;
        for t in 0..3 {
            let want = [1.5, 1.0, -1.0][t] * factor * [2.0, 3.0, 4.0][t] * u[t];
            assert!((y[t] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let tape = Tape::<f64>::new();
        let z = |s: &[usize]| tape.constant(Tensor::zeros(s));
        assert!(selective_scan(z(&[1, 3, 2]), z(&[1, 3, 2]), z(&[2, 4]), z(&[1, 3, 4]), z(&[1, 3, 4]), z(&[2])).is_ok());
        assert!(selective_scan(z(&[1, 3, 2]), z(&[1, 3, 1]), z(&[2, 4]), z(&[1, 3, 4]), z(&[1, 3, 4]), z(&[2])).is_err());
        assert!(selective_scan(z(&[1, 3, 2]), z(&[1, 3, 2]), z(&[3, 4]), z(&[1, 3, 4]), z(&[1, 3, 4]), z(&[2])).is_err());
        assert!(selective_scan(z(&[1, 3, 2]), z(&[1, 3, 2]), z(&[2, 4]), z(&[1, 3, 5]), z(&[1, 3, 4]), z(&[2])).is_err());
        assert!(selective_scan(z(&[1, 3, 2]), z(&[1, 3, 2]), z(&[2, 4]), z(&[1, 3, 4]), z(&[1, 3, 4]), z(&[3])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (bt, k, e, n) = (2, 5, 3, 4);
        let mut r = |s: &[usize], lo: f64, hi: f64| Tensor::from_fn(s, |_| rng.gen_range(lo..hi));
        let inputs = vec![
            r(&[bt, k, e], -1.0, 1.0),
            r(&[bt, k, e], 0.05, 0.8),
            r(&[e, n], -3.0, -0.3),
            r(&[bt, k, n], -1.0, 1.0),
            r(&[bt, k, n], -1.0, 1.0),
            r(&[e], -1.0, 1.0),
        ];
        let w = r(&[bt, k, e], -1.0, 1.0);
        let rep = gradcheck::check(&inputs, 1e-5, |tape, v| {
            let y = selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
            y.mul(tape.constant(w.clone())).unwrap().sum_all()
        });
        assert!(rep.worst() < 1e-5, "{rep:?}");
    }

    #[test]
    fn gradient_near_zero_exponent() {
        // delta * a inside the series branch of the slope
        let inputs = vec![
            Tensor::<f64>::from_f64(&[1, 3, 1], &[0.3, -0.2, 0.9]).unwrap(),
            Tensor::from_f64(&[1, 3, 1], &[1e-3, 2e-3, 5e-4]).unwrap(),
            Tensor::from_f64(&[1, 2], &[-0.4, -0.05]).unwrap(),
            Tensor::from_f64(&[1, 3, 2], &[0.5, -0.1, 0.2, 0.7, -0.3, 0.4]).unwrap(),
            Tensor::from_f64(&[1, 3, 2], &[1.0, 0.2, -0.6, 0.1, 0.3, 0.8]).unwrap(),
            Tensor::from_f64(&[1], &[0.25]).unwrap(),
        ];
        let rep = gradcheck::check(&inputs, 1e-5, |_, v| {
            selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap().square().sum_all()
        });
        assert!(rep.worst() < 1e-5, "{rep:?}");
    }
}
