//! Central finite-difference checking of tape gradients.
//!
//! The finite-difference side only ever evaluates the forward function, so it
//! stays independent of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{DMambaModel, ModelConfig, Variant};
use crate::nn::Forward;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is (numerically) zero are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Input or parameter name per entry of `max_rel_error`.
    pub labels: Vec<String>,
    /// Largest relative error per input.
    pub max_rel_error: Vec<f64>,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    /// Label and error of the worst input.
    pub fn worst_label(&self) -> Option<(&str, f64)> {
        self.labels
            .iter()
            .zip(&self.max_rel_error)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(l, &e)| (l.as_str(), e))
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`, for every entry of every input.
pub fn check<S, F>(inputs: &[Tensor<S>], h: f64, f: F) -> GradCheckReport
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Var<'t, S>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |xs: &[Tensor<S>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().item().as_f64()
    };

    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (i, g) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = S::lit(orig.as_f64() + h);
            let plus = eval(&work);
            work[i].data_mut()[j] = S::lit(orig.as_f64() - h);
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[j].as_f64(), numeric));
            checked += 1;
        }
        max_rel_error.push(worst);
    }
    GradCheckReport {
        labels: (0..inputs.len()).map(|i| format!("input{i}")).collect(),
        max_rel_error,
        checked,
    }
}

/// Check every parameter of `store` for the scalar produced by `f`. The
/// forward runs without dropout, so the objective is smooth.
pub fn check_params<S, F>(store: &ParamStore<S>, h: f64, f: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'t> Fn(&Forward<'t, S>) -> Result<Var<'t, S>>,
{
    let analytic = {
        let tape = Tape::new();
        let fwd = Forward::deterministic(&tape, store);
        let out = f(&fwd)?;
        let grads = tape.backward(out)?;
        fwd.params.gradients(&grads)
    };
    let eval = |s: &ParamStore<S>| -> Result<f64> {
        let tape = Tape::new();
        let fwd = Forward::deterministic(&tape, s);
        Ok(f(&fwd)?.value().item().as_f64())
    };
    let mut work = store.clone();
    let ids: Vec<_> = store.iter().map(|p| store.find(&p.name).expect("own name")).collect();
    let mut max_rel_error = Vec::with_capacity(ids.len());
    let mut checked = 0;
    for (id, g) in ids.iter().zip(&analytic) {
        let mut worst = 0.0f64;
        for j in 0..g.len() {
            let orig = work.get(*id).data()[j];
            work.get_mut(*id).data_mut()[j] = S::lit(orig.as_f64() + h);
            let plus = eval(&work)?;
            work.get_mut(*id).data_mut()[j] = S::lit(orig.as_f64() - h);
            let minus = eval(&work)?;
            work.get_mut(*id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[j].as_f64(), numeric));
            checked += 1;
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        labels: store.iter().map(|p| p.name.clone()).collect(),
        max_rel_error,
        checked,
    })
}

/// Small model used for whole-network gradient checks: `B=2, L=8, T=4, D=3`,
/// `d_model=8`, one layer.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        seq_len: 8,
        pred_len: 4,
        channels: 3,
        variant,
        d_model: 8,
        d_state: 4,
        d_ff: 16,
        e_layers: 1,
        ..ModelConfig::default()
    }
}

/// Check every parameter of the toy model for a smooth objective: the
/// forecast contracted with fixed random weights.
pub fn check_model(variant: Variant, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-2.0..2.0));
    let x = draw(&[2, 8, 3]);
    let w = draw(&[2, 4, 3]);
    let model = DMambaModel::<f64>::new(toy_config(variant), seed)?;
    check_params(&model.params, h, |f| {
        let y = model.forward(f, f.constant(x.clone()))?;
        Ok(y.mul(f.constant(w.clone()))?.sum_all())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-5;

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let r = check(&[a, b], H, |tape, v| {
            let wv = tape.constant(w.clone());
            v[0].matmul(v[1]).unwrap().mul(wv).unwrap().sum_all()
        });
        assert!(r.worst() < 1e-6, "{r:?}");
    }

    #[test]
    fn batched_matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 2]);
        let c = rand_tensor(&mut rng, &[4, 2]);
        let r = check(&[a, b, c], H, |_, v| {
            let x = v[0].matmul(v[1]).unwrap();
            let y = v[0].matmul(v[2]).unwrap();
            x.mul(y).unwrap().sum_all()
        });
        assert!(r.worst() < TOL, "{r:?}");
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 5]);
        let g = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        let w = rand_tensor(&mut rng, &[2, 5]);
        let r = check(&[x, g, b], H, |tape, v| {
            let y = v[0].layer_norm(v[1], v[2], 1e-5).unwrap();
            y.mul(tape.constant(w.clone())).unwrap().sum_all()
        });
        assert!(r.worst() < TOL, "{r:?}");
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[3, 1]);
        let c = rand_tensor(&mut rng, &[4]).map(|v| v.abs() + 0.5);
        let w = rand_tensor(&mut rng, &[2, 4, 3]);
        let r = check(&[a, b, c], H, |tape, v| {
            let x = v[0].sub(v[1]).unwrap().div(v[2]).unwrap();
            let y = x.silu().add(x.gelu()).unwrap().add(x.tanh()).unwrap();
            let y = y.add(x.softplus()).unwrap().add(x.sigmoid().exp()).unwrap();
            let y = y.flip(1).unwrap().permute(&[0, 2, 1]).unwrap();
            let z = Var::concat(&[y, y.square()], 2).unwrap().narrow(2, 2, 3).unwrap();
            let p = z.avg_pool_last(2).unwrap();
            let s = v[2].sqrt().ln().mean_axis(0).unwrap().sum_all();
            z.mul(tape.constant(w.clone()))
                .unwrap()
                .sum_axis(1)
                .unwrap()
                .sum_all()
                .add(p.mean_all())
                .unwrap()
                .add(s)
                .unwrap()
        });
        assert!(r.worst() < TOL, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn unary_ops_match_finite_differences(seed in 0u64..10_000, op in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[6]);
            let r = check(&[x], H, |_, v| {
                let y = match op {
                    0 => v[0].exp(),
                    1 => v[0].softplus(),
                    2 => v[0].silu(),
                    3 => v[0].sigmoid(),
                    4 => v[0].tanh(),
                    5 => v[0].gelu(),
                    _ => v[0].square().scale(0.5).add_scalar(1.0),
                };
                y.sum_all()
            });
            prop_assert!(r.worst() < TOL, "op {} worst {}", op, r.worst());
        }
    }
}
