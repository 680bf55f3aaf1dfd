use super::{broadcast_shape, strides, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    S::gemm(m, k, n, a, (k_, 1), b, (n_, 1), c, (n_, 1));
}

/// c[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt<S: Scalar>(g: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    S::gemm(m, n, k, g, (n_, 1), b, (1, n_), c, (k_, 1));
}

/// c[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn<S: Scalar>(a: &[S], g: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    S::gemm(k, m, n, a, (1, k_), g, (n_, 1), c, (n_, 1));
}

/// Batch layout of a broadcast matmul: for each output batch, which
/// matrix of `a` and of `b` it reads.
struct BatchPlan {
    out_shape: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let lead = broadcast_shape(la, lb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let nb: usize = lead.iter().product();
    let bstride = |l: &[usize]| -> Vec<usize> {
        let pad = lead.len() - l.len();
        let st = strides(l);
        (0..lead.len())
            .map(|i| if i < pad || l[i - pad] == 1 { 0 } else { st[i - pad] })
            .collect()
    };
    let (sa, sb) = (bstride(la), bstride(lb));
    let mut pairs = Vec::with_capacity(nb);
    let mut idx = vec![0usize; lead.len()];
    for _ in 0..nb {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((ia, ib));
        for d in (0..lead.len()).rev() {
            idx[d] += 1;
            if idx[d] < lead[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = lead;
    out_shape.extend([m, n]);
    Ok(BatchPlan {
        out_shape,
        pairs,
        m,
        k,
        n,
    })
}

pub(crate) fn matmul_tensor<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let p = plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![S::zero(); p.pairs.len() * m * n];
    if b.ndim() == 2 {
        // weights shared across the batch: one tall gemm
        let rows = a.len() / k.max(1);
        gemm_nn(a.data(), b.data(), &mut out, rows, k, n);
    } else {
        for (bi, &(ia, ib)) in p.pairs.iter().enumerate() {
            gemm_nn(
                &a.data()[ia * m * k..(ia + 1) * m * k],
                &b.data()[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let out = matmul_tensor(&a, &b)?;
        Ok(self.tape.custom(&[self, other], out, move |ctx| {
            let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let p = plan(a.shape(), b.shape()).expect("checked in forward");
            let (m, k, n) = (p.m, p.k, p.n);
            let mut ga = vec![S::zero(); a.len()];
            let mut gb = vec![S::zero(); b.len()];
            if b.ndim() == 2 && a.len() / k.max(1) * n == g.len() {
                let rows = a.len() / k.max(1);
                gemm_nt(g.data(), b.data(), &mut ga, rows, k, n);
                gemm_tn(a.data(), g.data(), &mut gb, rows, k, n);
            } else {
                for (bi, &(ia, ib)) in p.pairs.iter().enumerate() {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    gemm_nt(gs, &b.data()[ib * k * n..(ib + 1) * k * n], &mut ga[ia * m * k..(ia + 1) * m * k], m, k, n);
                    gemm_tn(&a.data()[ia * m * k..(ia + 1) * m * k], gs, &mut gb[ib * k * n..(ib + 1) * k * n], m, k, n);
                }
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                Some(Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        }))
    }

    /// Normalize over the last axis, then apply `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        if eps <= S::zero() {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::InvalidArgument("layer_norm on a scalar".into()))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(d) {
            let (mean, rstd) = row_stats(row, eps);
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                out.push(g * (v - mean) * rstd + b);
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.custom(&[self, gamma, beta], out, move |ctx| {
            let (x, gamma, g) = (ctx.input(0), ctx.input(1).data(), ctx.grad);
            let mut gx = Vec::with_capacity(x.len());
            let mut ggamma = vec![S::zero(); d];
            let mut gbeta = vec![S::zero(); d];
            let inv_d = S::one() / S::of_usize(d);
            let mut xhat = vec![S::zero(); d];
            let mut dxhat = vec![S::zero(); d];
            for (row, grow) in x.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                let (mean, rstd) = row_stats(row, eps);
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = grow[j] * gamma[j];
                    sum_dxhat = sum_dxhat + dxhat[j];
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    ggamma[j] = ggamma[j] + grow[j] * xhat[j];
                    gbeta[j] = gbeta[j] + grow[j];
                }
                for j in 0..d {
                    gx.push(rstd * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat));
                }
            }
            vec![
                Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![d], ggamma)),
                Some(Tensor::from_parts(vec![d], gbeta)),
            ]
        }))
    }
}

fn row_stats<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::of_usize(row.len());
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let tape = Tape::new();
        let i = tape.var(Tensor::eye(2));
        let m = tape.var(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let tape = Tape::new();
        let a = tape.var(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.var(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn batched_broadcast_matches_loop() {
        let tape = Tape::new();
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[3, 4, 5], |i| (i as f64 * 0.11).cos());
        let c = tape.var(a.clone()).matmul(tape.var(b.clone())).unwrap();
        for bi in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|p| a.at(&[bi, i, p]) * b.at(&[bi, p, j])).sum();
                    assert!((c.value().at(&[bi, i, j]) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::full(&[1, 4], 3.0));
        let y = x
            .layer_norm(tape.constant(Tensor::ones(&[4])), tape.constant(Tensor::zeros(&[4])), 1e-5)
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_points() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 3.0]));
        let y = x
            .layer_norm(tape.constant(Tensor::ones(&[2])), tape.constant(Tensor::zeros(&[2])), 1e-12)
            .unwrap();
        let v = y.value();
        assert!((v.data()[0] + 1.0).abs() < 1e-9 && (v.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::ones(&[2]));
        let g = tape.constant(Tensor::ones(&[2]));
        assert!(x.layer_norm(g, g, 0.0).is_err());
    }

    #[test]
    fn layer_norm_row_moments() {
        let tape = Tape::new();
        let x = tape.var(Tensor::<f64>::from_fn(&[3, 6], |i| (i as f64 * 1.3).sin() * 4.0 + 2.0));
        let y = x
            .layer_norm(tape.constant(Tensor::ones(&[6])), tape.constant(Tensor::zeros(&[6])), 1e-14)
            .unwrap();
        for row in y.value().data().chunks(6) {
            let m: f64 = row.iter().sum::<f64>() / 6.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }
}
