//! Horizon-weighted training loss and evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// `w_t = -atan(t + 1) + pi/4 + 1`, decaying from 1 towards `1 - pi/4`.
pub fn arctan_weights(pred_len: usize) -> Result<Vec<f64>> {
    if pred_len == 0 {
        return Err(Error::Config("loss weights need pred_len >= 1".into()));
    }
    Ok((0..pred_len)
        .map(|t| -((t + 1) as f64).atan() + std::f64::consts::FRAC_PI_4 + 1.0)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Arctan,
    Mse,
    Mae,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Arctan => "arctan",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arctan" => Ok(LossKind::Arctan),
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            _ => Err(Error::Config(format!("unknown loss {s:?}; expected arctan, mse or mae"))),
        }
    }
}

fn check_pair<S: Scalar>(op: &'static str, pred: &Tensor<S>, target: &Tensor<S>) -> Result<()> {
    if pred.shape() != target.shape() || pred.is_empty() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    Ok(())
}

/// Mean over all `B x T x D` entries of `w_t |pred - target|`, for
/// `[B, T, D]` tensors. Subgradient 0 where the residual is 0.
pub fn weighted_abs_loss<'t, S: Scalar>(pred: Var<'t, S>, target: &Tensor<S>, weights: &[f64]) -> Result<Var<'t, S>> {
    let p = pred.value();
    check_pair("weighted loss", &p, target)?;
    let [_, t, d] = *p.shape() else {
        return Err(Error::InvalidArgument(format!("loss expects [B, T, D], got {:?}", p.shape())));
    };
    if weights.len() != t {
        return Err(Error::shape("loss weights", &[t], &[weights.len()]));
    }
    let w: Vec<S> = weights.iter().map(|&v| S::lit(v)).collect();
    let n = S::of_usize(p.len());
    let mut sum = S::zero();
    for (i, (&a, &b)) in p.data().iter().zip(target.data()).enumerate() {
        sum = sum + w[(i / d) % t] * (a - b).abs();
    }
    let target = target.clone();
    Ok(pred.tape().custom(&[pred], Tensor::scalar(sum / n), move |ctx| {
        let scale = ctx.grad.item() / n;
        let g = ctx
            .input(0)
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .map(|(i, (&a, &b))| {
                let r = a - b;
                let sign = if r > S::zero() {
                    S::one()
                } else if r < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                };
                w[(i / d) % t] * sign * scale
            })
            .collect();
        vec![Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), g))]
    }))
}

pub fn mse_loss<'t, S: Scalar>(pred: Var<'t, S>, target: &Tensor<S>) -> Result<Var<'t, S>> {
    check_pair("mse loss", &pred.value(), target)?;
    Ok(pred.sub(pred.tape().constant(target.clone()))?.square().mean_all())
}

/// Training objective for `kind` over `[B, T, D]` predictions.
pub fn loss<'t, S: Scalar>(kind: LossKind, pred: Var<'t, S>, target: &Tensor<S>) -> Result<Var<'t, S>> {
    let t = pred.shape().get(1).copied().unwrap_or(0);
    match kind {
        LossKind::Arctan => weighted_abs_loss(pred, target, &arctan_weights(t)?),
        LossKind::Mae => weighted_abs_loss(pred, target, &vec![1.0; t]),
        LossKind::Mse => mse_loss(pred, target),
    }
}

/// Running MSE/MAE sums, accumulated in call order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub count: usize,
}

impl Metrics {
    pub fn update<S: Scalar>(&mut self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<()> {
        check_pair("metrics", pred, target)?;
        for (&a, &b) in pred.data().iter().zip(target.data()) {
            let r = a.as_f64() - b.as_f64();
            self.sum_sq += r * r;
            self.sum_abs += r.abs();
        }
        self.count += pred.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &Metrics) {
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.count += other.count;
    }

    pub fn mse(&self) -> f64 {
        self.sum_sq / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.sum_abs / self.count as f64
    }
}

/// `(mse, mae)` over every entry.
pub fn metrics<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, f64)> {
    let mut m = Metrics::default();
    m.update(pred, target)?;
    Ok((m.mse(), m.mae()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn weight_values() {
        let w = arctan_weights(720).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.678_250).abs() < 1e-6, "{}", w[1]);
        // independent form: atan(720) = pi/2 - atan(1/720)
        let closed = 1.0 - std::f64::consts::FRAC_PI_4 + (1.0f64 / 720.0).atan();
        assert!((w[719] - closed).abs() < 1e-12, "{}", w[719]);
        assert!((w[719] - 0.215_892).abs() < 1e-3);
        let limit = 1.0 - std::f64::consts::FRAC_PI_4;
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        assert!(w.iter().all(|&v| v > limit));
        assert!(arctan_weights(0).is_err());
    }

    #[test]
    fn single_term_loss() {
        let tape = Tape::<f64>::new();
        let p = tape.var(Tensor::from_f64(&[1, 1, 1], &[3.0]).unwrap());
        let y = Tensor::from_f64(&[1, 1, 1], &[1.0]).unwrap();
        assert_eq!(loss(LossKind::Arctan, p, &y).unwrap().value().item(), 2.0);
        assert_eq!(loss(LossKind::Arctan, tape.var(y.clone()), &y).unwrap().value().item(), 0.0);
    }

    #[test]
    fn unit_weights_equal_mae_bitwise() {
        for seed in 0..20 {
            let p = rand_tensor(seed, &[4, 6, 3]);
            let y = rand_tensor(seed + 100, &[4, 6, 3]);
            let tape = Tape::<f64>::new();
            let l = loss(LossKind::Mae, tape.var(p.clone()), &y).unwrap().value().item();
            let (_, mae) = metrics(&p, &y).unwrap();
            assert_eq!(l.to_bits(), mae.to_bits());
        }
    }

    #[test]
    fn metric_examples() {
        let y = rand_tensor(1, &[2, 3, 2]);
        assert_eq!(metrics(&y, &y).unwrap(), (0.0, 0.0));
        let p = y.map(|v| v + 1.0);
        let (mse, mae) = metrics(&p, &y).unwrap();
        assert!((mse - 1.0).abs() < 1e-15 && (mae - 1.0).abs() < 1e-15);
        assert!(metrics(&y, &Tensor::zeros(&[2, 3, 1])).is_err());
    }

    #[test]
    fn metrics_match_two_pass_oracle() {
        let p = rand_tensor(2, &[5, 7, 3]);
        let y = rand_tensor(3, &[5, 7, 3]);
        let diffs: Vec<f64> = p.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
        let sq: Vec<f64> = diffs.iter().map(|d| d * d).collect();
        let mse = sq.iter().rev().sum::<f64>() / sq.len() as f64;
        let mae = diffs.iter().map(|d| d.abs()).rev().sum::<f64>() / diffs.len() as f64;
        let (m, a) = metrics(&p, &y).unwrap();
        assert!((m - mse).abs() < 1e-12 && (a - mae).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let y = rand_tensor(4, &[2, 5, 3]);
        for kind in [LossKind::Arctan, LossKind::Mse, LossKind::Mae] {
            let rep = gradcheck::check(&[rand_tensor(5, &[2, 5, 3])], 1e-6, |_, v| loss(kind, v[0], &y).unwrap());
            assert!(rep.worst() < 1e-6, "{kind}: {rep:?}");
        }
    }

    #[test]
    fn zero_residual_has_zero_subgradient() {
        let y = rand_tensor(6, &[1, 3, 1]);
        let tape = Tape::new();
        let p = tape.var(y.clone());
        let g = tape.backward(loss(LossKind::Arctan, p, &y).unwrap()).unwrap().get(p);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_kind_names() {
        for k in [LossKind::Arctan, LossKind::Mse, LossKind::Mae] {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("huber".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn weights_bounded_and_decreasing(t in 1usize..2000) {
            let w = arctan_weights(t).unwrap();
            prop_assert_eq!(w[0], 1.0);
            prop_assert!(w.windows(2).all(|p| p[1] < p[0]));
            prop_assert!(w.iter().all(|&v| v > 1.0 - std::f64::consts::FRAC_PI_4));
        }
    }
}
