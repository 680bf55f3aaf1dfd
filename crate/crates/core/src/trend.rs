//! Channel-independent MLP over the trend component.

use rand_chacha::ChaCha8Rng;

use crate::decomp::dims3;
use crate::error::{Error, Result};
use crate::nn::{Forward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Var;

pub const TREND_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrendConfig {
    pub layers: usize,
    pub pool: usize,
    /// Off only as a test hook, making the head linear.
    pub layer_norm: bool,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            layers: 2,
            pool: 3,
            layer_norm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrendLayer {
    pub weight: Linear,
    pub norm: Option<LayerNorm>,
}

/// `h_l = LN(AvgPool(W_l h_{l-1}))` per channel, then `W_out h_N`. Each
/// `W_l` maps to width L; pooling (stride 1, no padding) shrinks it to
/// `L - p + 1`. No biases, no activation.
#[derive(Clone, Debug)]
pub struct TrendHead {
    pub layers: Vec<TrendLayer>,
    pub out: Linear,
    pub pool: usize,
    seq_len: usize,
    pred_len: usize,
}

impl TrendHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        seq_len: usize,
        pred_len: usize,
        cfg: &TrendConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("trend head needs at least one layer".into()));
        }
        if cfg.pool == 0 || cfg.pool > seq_len {
            return Err(Error::Config(format!(
                "trend pool window {} leaves no features for seq_len {seq_len}",
                cfg.pool
            )));
        }
        let pooled = seq_len - cfg.pool + 1;
        let mut width = seq_len;
        let layers = (0..cfg.layers)
            .map(|i| {
                let weight = Linear::new(store, &format!("{name}.layers.{i}.weight"), width, seq_len, false, rng);
                width = pooled;
                let norm = cfg
                    .layer_norm
                    .then(|| LayerNorm::new(store, &format!("{name}.layers.{i}.norm"), pooled, TREND_LN_EPS));
                TrendLayer { weight, norm }
            })
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), pooled, pred_len, false, rng);
        Ok(TrendHead {
            layers,
            out,
            pool: cfg.pool,
            seq_len,
            pred_len,
        })
    }

    pub fn pred_len(&self) -> usize {
        self.pred_len
    }

    /// `[B, L, D] -> [B, T, D]`.
    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (_, l, _) = dims3("trend head", &x.shape())?;
        if l != self.seq_len {
            return Err(Error::shape("trend head", &[self.seq_len], &[l]));
        }
        let mut h = x.permute(&[0, 2, 1])?;
        for layer in &self.layers {
            h = layer.weight.forward(f, h)?.avg_pool_last(self.pool)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(f, h)?;
            }
        }
        self.out.forward(f, h)?.permute(&[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::{Tape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn head(store: &mut ParamStore<f64>, l: usize, t: usize, cfg: TrendConfig, seed: u64) -> TrendHead {
        TrendHead::new(store, "trend", l, t, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn run(head: &TrendHead, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let f = Forward::new(&tape, store, false, ChaCha8Rng::seed_from_u64(0));
        (*head.forward(&f, tape.constant(x.clone())).unwrap().value()).clone()
    }

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_configuration() {
        let mut store = ParamStore::new();
        let cfg = TrendConfig {
            layers: 1,
            pool: 1,
            layer_norm: false,
        };
        let h = head(&mut store, 5, 5, cfg, 0);
        *store.get_mut(h.layers[0].weight.weight) = Tensor::eye(5);
        *store.get_mut(h.out.weight) = Tensor::eye(5);
        let x = rand_tensor(1, &[2, 5, 3]);
        assert_eq!(run(&h, &store, &x), x);
    }

    #[test]
    fn constant_input_gives_constant_pooled_activations() {
        let mut store = ParamStore::new();
        let cfg = TrendConfig {
            layers: 1,
            pool: 3,
            layer_norm: false,
        };
        let h = head(&mut store, 6, 2, cfg, 0);
        // every row of W equal, so W h_0 is constant for constant h_0
        *store.get_mut(h.layers[0].weight.weight) = Tensor::full(&[6, 6], 0.5);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, false, ChaCha8Rng::seed_from_u64(0));
        let x = tape.constant(Tensor::full(&[1, 6, 2], 2.0));
        let pooled = h.layers[0]
            .weight
            .forward(&f, x.permute(&[0, 2, 1]).unwrap())
            .unwrap()
            .avg_pool_last(3)
            .unwrap()
            .value();
        assert_eq!(pooled.shape(), &[1, 2, 4]);
        assert!(pooled.data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn output_length_is_horizon() {
        for (l, t, layers, pool) in [(8, 4, 2, 3), (12, 20, 3, 5), (4, 1, 1, 4), (96, 96, 2, 3)] {
            let mut store = ParamStore::new();
            let cfg = TrendConfig {
                layers,
                pool,
                layer_norm: true,
            };
            let h = head(&mut store, l, t, cfg, 3);
            let y = run(&h, &store, &rand_tensor(4, &[2, l, 3]));
            assert_eq!(y.shape(), &[2, t, 3]);
        }
    }

    #[test]
    fn pool_wider_than_window_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let cfg = TrendConfig {
            layers: 2,
            pool: 9,
            layer_norm: true,
        };
        assert!(TrendHead::new(&mut store, "t", 8, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gradient_on_toy_config() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 8, 4, TrendConfig::default(), 5);
        let x = rand_tensor(6, &[2, 8, 3]);
        let w = rand_tensor(7, &[2, 4, 3]);
        let rep = gradcheck::check_params(&store, 1e-5, |f| {
            let y = h.forward(f, f.constant(x.clone()))?;
            Ok(y.mul(f.constant(w.clone()))?.sum_all())
        })
        .unwrap();
        assert!(rep.worst() < 1e-4, "{rep:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn channel_permutation_equivariance(seed in 0u64..1000, shift in 1usize..4) {
            let mut store = ParamStore::new();
            let h = head(&mut store, 8, 4, TrendConfig::default(), seed);
            let x = rand_tensor(seed + 1, &[2, 8, 4]);
            let perm = |t: &Tensor<f64>| {
                let s = t.shape().to_vec();
                Tensor::from_fn(&s, |i| {
                    let c = i % s[2];
                    t.data()[i - c + (c + shift) % s[2]]
                })
            };
            let a = perm(&run(&h, &store, &x));
            let b = run(&h, &store, &perm(&x));
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn linear_without_layer_norm(seed in 0u64..1000) {
            let mut store = ParamStore::new();
            let cfg = TrendConfig { layers: 2, pool: 3, layer_norm: false };
            let h = head(&mut store, 10, 5, cfg, seed);
            let a = rand_tensor(seed + 1, &[2, 10, 3]);
            let b = rand_tensor(seed + 2, &[2, 10, 3]);
            let sum = a.zip_map(&b, |x, y| x + y).unwrap();
            let lhs = run(&h, &store, &sum);
            let rhs = run(&h, &store, &a).zip_map(&run(&h, &store, &b), |x, y| x + y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }
}
