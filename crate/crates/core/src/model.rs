//! The dual-stream forecaster and its ablation wirings.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::{check_alpha, dims3, ema_decompose};
use crate::error::{Error, Result};
use crate::mamba::{MambaConfig, MambaLayer};
use crate::nn::{Forward, Linear};
use crate::params::ParamStore;
use crate::revin::Revin;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::trend::{TrendConfig, TrendHead};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Variate-token Mamba on the seasonal part, MLP on the trend.
    DMamba,
    AllMlp,
    /// Stream heads exchanged: MLP on the seasonal part, Mamba on the trend.
    MambaTrend,
    AllMamba,
    /// Mamba scanning time steps instead of variates on the seasonal part.
    TMamba,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::DMamba,
        Variant::AllMlp,
        Variant::MambaTrend,
        Variant::AllMamba,
        Variant::TMamba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DMamba => "DMamba",
            Variant::AllMlp => "All-MLP",
            Variant::MambaTrend => "Mamba-Trend",
            Variant::AllMamba => "All-Mamba",
            Variant::TMamba => "T-Mamba",
        }
    }

    /// Head kinds for the (seasonal, trend) streams.
    pub fn heads(self) -> (HeadKind, HeadKind) {
        match self {
            Variant::DMamba => (HeadKind::VariateMamba, HeadKind::Mlp),
            Variant::AllMlp => (HeadKind::Mlp, HeadKind::Mlp),
            Variant::MambaTrend => (HeadKind::Mlp, HeadKind::VariateMamba),
            Variant::AllMamba => (HeadKind::VariateMamba, HeadKind::VariateMamba),
            Variant::TMamba => (HeadKind::TemporalMamba, HeadKind::Mlp),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().replace('-', "").to_ascii_lowercase() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of dmamba, all-mlp, mamba-trend, all-mamba, t-mamba"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Mlp,
    VariateMamba,
    TemporalMamba,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub variant: Variant,
    pub alpha: f64,
    pub revin_eps: f64,
    pub revin_affine: bool,
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub d_ff: usize,
    pub e_layers: usize,
    pub dropout: f64,
    pub trend_layers: usize,
    pub trend_pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 96,
            pred_len: 96,
            channels: 7,
            variant: Variant::DMamba,
            alpha: crate::decomp::DEFAULT_ALPHA,
            revin_eps: crate::revin::DEFAULT_EPS,
            revin_affine: true,
            d_model: 128,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            d_ff: 256,
            e_layers: 2,
            dropout: 0.1,
            trend_layers: 2,
            trend_pool: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let positive = [
            ("seq_len", self.seq_len),
            ("pred_len", self.pred_len),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
            ("d_ff", self.d_ff),
            ("e_layers", self.e_layers),
            ("trend_layers", self.trend_layers),
            ("trend_pool", self.trend_pool),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2 for instance normalization".into()));
        }
        if self.trend_pool > self.seq_len {
            return Err(Error::Config(format!(
                "trend_pool {} exceeds seq_len {}",
                self.trend_pool, self.seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.revin_eps > 0.0) {
            return Err(Error::Config(format!("revin_eps must be positive, got {}", self.revin_eps)));
        }
        Ok(())
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }

    pub fn trend(&self) -> TrendConfig {
        TrendConfig {
            layers: self.trend_layers,
            pool: self.trend_pool,
            layer_norm: true,
        }
    }
}

/// Each variate's length-L window is one token; the layer stack scans the
/// D variate tokens.
#[derive(Clone, Debug)]
pub struct SeasonalHead {
    pub embed: Linear,
    pub layers: Vec<MambaLayer>,
    pub proj: Linear,
}

impl SeasonalHead {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.mamba();
        SeasonalHead {
            embed: Linear::new(store, &format!("{name}.embed"), cfg.seq_len, cfg.d_model, true, rng),
            layers: (0..cfg.e_layers)
                .map(|i| MambaLayer::new(store, &format!("{name}.layers.{i}"), &m, rng))
                .collect(),
            proj: Linear::new(store, &format!("{name}.proj"), cfg.d_model, cfg.pred_len, true, rng),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = self.embed.forward(f, x.permute(&[0, 2, 1])?)?;
        for layer in &self.layers {
            h = layer.forward(f, h)?;
        }
        self.proj.forward(f, h)?.permute(&[0, 2, 1])
    }
}

/// Time steps as tokens: embed D -> d_model per step, scan the L steps, map
/// back to D channels and then L -> T per channel.
#[derive(Clone, Debug)]
pub struct TemporalHead {
    pub embed: Linear,
    pub layers: Vec<MambaLayer>,
    pub out: Linear,
    pub time: Linear,
}

impl TemporalHead {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.mamba();
        TemporalHead {
            embed: Linear::new(store, &format!("{name}.embed"), cfg.channels, cfg.d_model, true, rng),
            layers: (0..cfg.e_layers)
                .map(|i| MambaLayer::new(store, &format!("{name}.layers.{i}"), &m, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), cfg.d_model, cfg.channels, true, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.seq_len, cfg.pred_len, true, rng),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = self.embed.forward(f, x)?;
        for layer in &self.layers {
            h = layer.forward(f, h)?;
        }
        let y = self.out.forward(f, h)?.permute(&[0, 2, 1])?;
        self.time.forward(f, y)?.permute(&[0, 2, 1])
    }
}

#[derive(Clone, Debug)]
pub enum StreamHead {
    Mlp(TrendHead),
    VariateMamba(SeasonalHead),
    TemporalMamba(TemporalHead),
}

impl StreamHead {
    pub fn new<S: Scalar>(
        kind: HeadKind,
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            HeadKind::Mlp => StreamHead::Mlp(TrendHead::new(store, name, cfg.seq_len, cfg.pred_len, &cfg.trend(), rng)?),
            HeadKind::VariateMamba => StreamHead::VariateMamba(SeasonalHead::new(store, name, cfg, rng)),
            HeadKind::TemporalMamba => StreamHead::TemporalMamba(TemporalHead::new(store, name, cfg, rng)),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            StreamHead::Mlp(_) => HeadKind::Mlp,
            StreamHead::VariateMamba(_) => HeadKind::VariateMamba,
            StreamHead::TemporalMamba(_) => HeadKind::TemporalMamba,
        }
    }

    /// `[B, L, D] -> [B, T, D]`.
    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        match self {
            StreamHead::Mlp(h) => h.forward(f, x),
            StreamHead::VariateMamba(h) => h.forward(f, x),
            StreamHead::TemporalMamba(h) => h.forward(f, x),
        }
    }
}

pub struct DMambaModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub revin: Revin,
    pub seasonal: StreamHead,
    pub trend: StreamHead,
    /// `2T -> T` over the concatenated horizons, shared by all channels.
    pub fusion: Linear,
}

impl<S: Scalar> DMambaModel<S> {
    /// Build with parameters drawn from a stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let revin = Revin::new(&mut params, config.channels, config.revin_eps, config.revin_affine)?;
        let (sk, tk) = config.variant.heads();
        let seasonal = StreamHead::new(sk, &mut params, "seasonal", &config, &mut rng)?;
        let trend = StreamHead::new(tk, &mut params, "trend", &config, &mut rng)?;
        let t = config.pred_len;
        let half = Tensor::from_fn(&[2 * t, t], |i| {
            let (r, c) = (i / t, i % t);
            if r % t == c {
                S::lit(0.5)
            } else {
                S::zero()
            }
        });
        let fusion = Linear::from_tensors(&mut params, "fusion", half, Some(Tensor::zeros(&[t])))?;
        Ok(DMambaModel {
            config,
            params,
            revin,
            seasonal,
            trend,
            fusion,
        })
    }

    /// `[B, L, D] -> [B, T, D]` in the input's scale.
    pub fn forward<'t>(&self, f: &Forward<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (_, l, d) = dims3("model input", &x.shape())?;
        if l != self.config.seq_len || d != self.config.channels {
            return Err(Error::shape(
                "model input",
                &[self.config.seq_len, self.config.channels],
                &[l, d],
            ));
        }
        let (xn, state) = self.revin.normalize(f, x)?;
        let dec = ema_decompose(xn, self.config.alpha)?;
        let ys = self.seasonal.forward(f, dec.seasonal)?;
        let yt = self.trend.forward(f, dec.trend)?;
        let both = Var::concat(&[ys, yt], 1)?.permute(&[0, 2, 1])?;
        let fused = self.fusion.forward(f, both)?.permute(&[0, 2, 1])?;
        self.revin.denormalize(f, fused, &state)
    }

    /// Inference without dropout or gradient bookkeeping.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.params, false, ChaCha8Rng::seed_from_u64(0));
        let y = self.forward(&f, tape.constant(x.clone()))?;
        Ok((*y.value()).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// True if any selective-scan parameter is present.
    pub fn has_ssm_params(&self) -> bool {
        self.params.iter().any(|p| p.name.ends_with(".a_log"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn toy(variant: Variant) -> ModelConfig {
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

    fn rand_input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("all_mlp".parse::<Variant>().unwrap(), Variant::AllMlp);
        assert_eq!("TMAMBA".parse::<Variant>().unwrap(), Variant::TMamba);
        assert!("transformer".parse::<Variant>().is_err());
    }

    #[test]
    fn protocol_output_shape() {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            ..ModelConfig::default()
        };
        let model = DMambaModel::<f64>::new(cfg, 0).unwrap();
        let y = model.predict(&rand_input(1, &[32, 96, 7])).unwrap();
        assert_eq!(y.shape(), &[32, 96, 7]);
    }

    #[test]
    fn every_variant_runs_on_one_channel() {
        for v in Variant::ALL {
            let cfg = ModelConfig {
                channels: 1,
                ..toy(v)
            };
            let model = DMambaModel::<f64>::new(cfg, 0).unwrap();
            let y = model.predict(&rand_input(2, &[2, 8, 1])).unwrap();
            assert_eq!(y.shape(), &[2, 4, 1], "{v}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn zero_heads_forecast_the_instance_mean() {
        let mut model = DMambaModel::<f64>::new(toy(Variant::DMamba), 3).unwrap();
        for p in model.params.iter_mut() {
            if p.name.starts_with("seasonal.") || p.name.starts_with("trend.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let x = rand_input(4, &[2, 8, 3]);
        let y = model.predict(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mu = (0..8).map(|t| x.at(&[b, t, c])).sum::<f64>() / 8.0;
                for t in 0..4 {
                    assert!((y.at(&[b, t, c]) - mu).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_starts_as_the_average_of_both_streams() {
        let model = DMambaModel::<f64>::new(toy(Variant::DMamba), 0).unwrap();
        let w = model.params.get(model.fusion.weight);
        assert_eq!(w.shape(), &[8, 4]);
        assert_eq!(w.at(&[1, 1]), 0.5);
        assert_eq!(w.at(&[5, 1]), 0.5);
        assert_eq!(w.at(&[5, 2]), 0.0);
        assert_eq!(w.sum(), 4.0);
    }

    #[test]
    fn variant_wiring() {
        let manifests: Vec<_> = Variant::ALL
            .iter()
            .map(|&v| DMambaModel::<f64>::new(toy(v), 0).unwrap())
            .collect();
        let kinds: Vec<_> = manifests.iter().map(|m| (m.seasonal.kind(), m.trend.kind())).collect();
        assert_eq!(kinds[0], (HeadKind::VariateMamba, HeadKind::Mlp));
        assert_eq!(kinds[1], (HeadKind::Mlp, HeadKind::Mlp));
        assert_eq!(kinds[2], (HeadKind::Mlp, HeadKind::VariateMamba));
        assert_eq!(kinds[3], (HeadKind::VariateMamba, HeadKind::VariateMamba));
        assert_eq!(kinds[4], (HeadKind::TemporalMamba, HeadKind::Mlp));
        assert!(!manifests[1].has_ssm_params());
        assert!(manifests.iter().enumerate().all(|(i, m)| i == 1 || m.has_ssm_params()));
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(manifests[i].params.manifest(), manifests[j].params.manifest());
            }
        }
    }

    #[test]
    fn toy_model_gradients() {
        let x = rand_input(5, &[2, 8, 3]);
        let w = rand_input(6, &[2, 4, 3]);
        for v in Variant::ALL {
            let model = DMambaModel::<f64>::new(toy(v), 7).unwrap();
            let rep = crate::gradcheck::check_params(&model.params, 1e-5, |f| {
                let y = model.forward(f, f.constant(x.clone()))?;
                Ok(y.mul(f.constant(w.clone()))?.sum_all())
            })
            .unwrap();
            assert!(rep.worst() < 1e-3, "{v}: {:?}", rep.worst_label());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = DMambaModel::<f64>::new(toy(Variant::DMamba), 11).unwrap();
        let b = DMambaModel::<f64>::new(toy(Variant::DMamba), 11).unwrap();
        let c = DMambaModel::<f64>::new(toy(Variant::DMamba), 12).unwrap();
        assert_eq!(a.params.values(), b.params.values());
        assert_ne!(a.params.values(), c.params.values());
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ModelConfig { alpha: 0.0, ..toy(Variant::DMamba) },
            ModelConfig { seq_len: 1, trend_pool: 1, ..toy(Variant::DMamba) },
            ModelConfig { trend_pool: 9, ..toy(Variant::DMamba) },
            ModelConfig { dropout: 1.0, ..toy(Variant::DMamba) },
            ModelConfig { d_model: 0, ..toy(Variant::DMamba) },
        ];
        for cfg in bad {
            assert!(matches!(DMambaModel::<f64>::new(cfg, 0), Err(Error::Config(_))));
        }
        let model = DMambaModel::<f64>::new(toy(Variant::DMamba), 0).unwrap();
        assert!(model.predict(&Tensor::zeros(&[1, 8, 4])).is_err());
    }
}
