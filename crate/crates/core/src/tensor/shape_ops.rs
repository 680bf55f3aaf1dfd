//! Layout and reduction operations.

use super::ops::broadcast_zip;
use super::{numel, strides, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Copy `t` with its axes reordered so that output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_tensor<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    let nd = shape.len();
    let in_st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let n = t.len();
    let src = t.data();
    let mut out = Vec::with_capacity(n);
    if nd == 0 || n == 0 {
        return t.clone();
    }
    // innermost loop unrolled over the last output axis
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_st = st[last];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n / inner {
        let mut o = off;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_st;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn flip_tensor<S: Scalar>(t: &Tensor<S>, axis: usize) -> Tensor<S> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    for o in 0..outer {
        for i in (0..len).rev() {
            let base = (o * len + i) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn narrow_tensor<S: Scalar>(t: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let full = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::from_parts(out_shape, out)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn expand<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    broadcast_zip("expand", &Tensor::zeros(shape), g, |_, y| y).expect("reduced shape broadcasts back")
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value();
        let out = v.reshape(shape)?;
        let in_shape = v.shape().to_vec();
        Ok(self.tape.custom(&[self], out, move |ctx| {
            vec![Some(ctx.grad.reshape(&in_shape).expect("same numel"))]
        }))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value();
        let nd = v.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of {nd} axes"
            )));
        }
        let out = permute_tensor(&v, perm);
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape.custom(&[self], out, move |ctx| {
            vec![Some(permute_tensor(ctx.grad, &inverse))]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, S>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(Error::InvalidArgument("transpose_last needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Reverse the order of entries along `axis`.
    pub fn flip(self, axis: usize) -> Result<Var<'t, S>> {
        let v = self.value();
        check_axis("flip", v.shape(), axis)?;
        let out = flip_tensor(&v, axis);
        Ok(self
            .tape
            .custom(&[self], out, move |ctx| vec![Some(flip_tensor(ctx.grad, axis))]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let v = self.value();
        check_axis("narrow", v.shape(), axis)?;
        if start + len > v.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow: [{start}, {}) exceeds axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let out = narrow_tensor(&v, axis, start, len);
        let in_shape = v.shape().to_vec();
        Ok(self.tape.custom(&[self], out, move |ctx| {
            let outer: usize = in_shape[..axis].iter().product();
            let full = in_shape[axis];
            let inner: usize = in_shape[axis + 1..].iter().product();
            let mut g = vec![S::zero(); numel(&in_shape)];
            let src = ctx.grad.data();
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let s = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), g))]
        }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                let s = o * l * inner;
                out.extend_from_slice(&v.data()[s..s + l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let out = Tensor::from_parts(out_shape, out);
        Ok(tape.custom(parts, out, move |ctx| {
            let mut start = 0;
            lens.iter()
                .map(|&l| {
                    let g = narrow_tensor(ctx.grad, axis, start, l);
                    start += l;
                    Some(g)
                })
                .collect()
        }))
    }

    pub fn sum_all(self) -> Var<'t, S> {
        let v = self.value();
        let out = Tensor::scalar(v.sum());
        let in_shape = v.shape().to_vec();
        self.tape.custom(&[self], out, move |ctx| {
            vec![Some(Tensor::full(&in_shape, ctx.grad.item()))]
        })
    }

    pub fn mean_all(self) -> Var<'t, S> {
        let n = S::of_usize(self.value().len());
        self.sum_all().scale(S::one() / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, S>> {
        let v = self.value();
        check_axis("sum_axis", v.shape(), axis)?;
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = v.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let in_shape = shape.to_vec();
        Ok(self.tape.custom(
            &[self],
            Tensor::from_parts(out_shape, out),
            move |ctx| vec![Some(expand(ctx.grad, &in_shape))],
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, S>> {
        let n = S::of_usize(self.value().shape().get(axis).copied().unwrap_or(1));
        Ok(self.sum_axis(axis)?.scale(S::one() / n))
    }

    /// Mean over sliding windows of length `window` (stride 1, no padding)
    /// along the last axis; that axis shrinks by `window - 1`.
    pub fn avg_pool_last(self, window: usize) -> Result<Var<'t, S>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let Some(&n) = shape.last() else {
            return Err(Error::InvalidArgument("avg_pool_last on a scalar".into()));
        };
        if window == 0 || window > n {
            return Err(Error::InvalidArgument(format!(
                "avg_pool window {window} invalid for length {n}"
            )));
        }
        let m = n - window + 1;
        let inv = S::one() / S::of_usize(window);
        let rows = v.len() / n;
        let mut out = Vec::with_capacity(rows * m);
        for r in v.data().chunks_exact(n) {
            let mut acc: S = r[..window].iter().copied().sum();
            out.push(acc * inv);
            for j in 1..m {
                acc = acc + r[j + window - 1] - r[j - 1];
                out.push(acc * inv);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = m;
        Ok(self.tape.custom(&[self], Tensor::from_parts(out_shape, out), move |ctx| {
            let mut g = vec![S::zero(); rows * n];
            for (gr, go) in g.chunks_exact_mut(n).zip(ctx.grad.data().chunks_exact(m)) {
                for (j, &gj) in go.iter().enumerate() {
                    let d = gj * inv;
                    for x in &mut gr[j..j + window] {
                        *x = *x + d;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), g))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn flip_is_an_involution() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64).sin());
        let v = tape.var(x.clone());
        for axis in 0..3 {
            let y = v.flip(axis).unwrap().flip(axis).unwrap();
            assert_eq!(*y.value(), x);
        }
        let y = v.flip(1).unwrap();
        assert_eq!(y.value().at(&[1, 0, 2]), x.at(&[1, 2, 2]));
    }

    #[test]
    fn permute_moves_axes() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let y = tape.var(x.clone()).permute(&[0, 2, 1]).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 3]);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(y.value().at(&[b, j, i]), x.at(&[b, i, j]));
                }
            }
        }
        let z = tape.var(x.clone()).permute(&[2, 0, 1]).unwrap();
        assert_eq!(z.value().at(&[3, 1, 2]), x.at(&[1, 2, 3]));
    }

    #[test]
    fn concat_and_narrow_invert() {
        let tape = Tape::new();
        let a = tape.var(Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64));
        let b = tape.var(Tensor::<f64>::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = crate::tensor::Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        assert_eq!(*c.narrow(1, 0, 2).unwrap().value(), *a.value());
        assert_eq!(*c.narrow(1, 2, 1).unwrap().value(), *b.value());
    }

    #[test]
    fn sum_gradients() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let g = tape.backward(x.square().sum_all()).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn avg_pool_of_constants_is_constant() {
        let tape = Tape::new();
        let x = tape.var(Tensor::<f64>::full(&[2, 7], 3.5));
        let y = x.avg_pool_last(3).unwrap();
        assert_eq!(y.shape(), vec![2, 5]);
        assert!(y.value().data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn unreachable_grad_is_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::<f64>::ones(&[3]));
        let y = tape.var(Tensor::<f64>::ones(&[2]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(y).data(), &[0.0, 0.0]);
        assert!(!g.is_reached(y));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.var(Tensor::<f64>::ones(&[3]));
        assert!(tape.backward(x.exp()).is_err());
    }
}
