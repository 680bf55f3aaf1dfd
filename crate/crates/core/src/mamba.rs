//! Gated selective-SSM blocks and the bidirectional layer built from them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::decomp::dims3;
use crate::error::{Error, Result};
use crate::nn::{Forward, LayerNorm, Linear};
use crate::params::{uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::selective_scan;
use crate::tensor::{ops::softplus_inverse, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

/// Causal depthwise convolution along axis 1 of `[B, K, E]`: output token
/// `t` sees inputs `t - W + 1 ..= t`, with zeros before the first token.
/// `weight` is `[E, W]` and `bias` is `[E]`.
pub fn causal_depthwise_conv<'t, S: Scalar>(
    x: Var<'t, S>,
    weight: Var<'t, S>,
    bias: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let (b, k, e) = dims3("causal conv", xv.shape())?;
    let [we, w] = *wv.shape() else {
        return Err(Error::shape("causal conv weight", &[e, 0], wv.shape()));
    };
    if we != e || w == 0 {
        return Err(Error::shape("causal conv weight", &[e, w], wv.shape()));
    }
    if bv.shape() != [e] {
        return Err(Error::shape("causal conv bias", &[e], bv.shape()));
    }
    let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
    let mut out = vec![S::zero(); xd.len()];
    for bi in 0..b {
        for t in 0..k {
            let row = &mut out[(bi * k + t) * e..(bi * k + t + 1) * e];
            row.copy_from_slice(bd);
            for j in 0..w {
                // tap j reads token t + j - (w - 1)
                let Some(s) = (t + j).checked_sub(w - 1) else { continue };
                let src = &xd[(bi * k + s) * e..(bi * k + s + 1) * e];
                for c in 0..e {
                    row[c] = row[c] + wd[c * w + j] * src[c];
                }
            }
        }
    }
    let shape = xv.shape().to_vec();
    let out = Tensor::from_parts(shape.clone(), out);
    Ok(x.tape().custom(&[x, weight, bias], out, move |ctx| {
        let (xd, wd, g) = (ctx.input(0).data(), ctx.input(1).data(), ctx.grad.data());
        let mut gx = vec![S::zero(); xd.len()];
        let mut gw = vec![S::zero(); wd.len()];
        let mut gb = vec![S::zero(); e];
        for bi in 0..b {
            for t in 0..k {
                let grow = &g[(bi * k + t) * e..(bi * k + t + 1) * e];
                for c in 0..e {
                    gb[c] = gb[c] + grow[c];
                }
                for j in 0..w {
                    let Some(s) = (t + j).checked_sub(w - 1) else { continue };
                    let base = (bi * k + s) * e;
                    for c in 0..e {
                        gx[base + c] = gx[base + c] + grow[c] * wd[c * w + j];
                        gw[c * w + j] = gw[c * w + j] + grow[c] * xd[base + c];
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(shape.clone(), gx)),
            Some(Tensor::from_parts(vec![e, w], gw)),
            Some(Tensor::from_parts(vec![e], gb)),
        ]
    }))
}

/// One direction of the scan: in-projection with a gate, causal conv,
/// input-dependent `(delta, B, C)`, selective scan and out-projection.
#[derive(Clone, Debug)]
pub struct MambaBranch {
    pub in_proj: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    d_inner: usize,
    d_state: usize,
    dt_rank: usize,
}

impl MambaBranch {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &MambaConfig, rng: &mut ChaCha8Rng) -> Self {
        let (dm, di, n, r) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank());
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), dm, 2 * di, false, rng);
        let conv_bound = 1.0 / (cfg.d_conv as f64).sqrt();
        let conv_weight = store.add(format!("{name}.conv.weight"), uniform(rng, &[di, cfg.d_conv], conv_bound));
        let conv_bias = store.add(format!("{name}.conv.bias"), uniform(rng, &[di], conv_bound));
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), di, r + 2 * n, false, rng);
        let dt_weight = uniform(rng, &[r, di], 1.0 / (r as f64).sqrt());
        // step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias = Tensor::from_fn(&[di], |_| {
            let dt = rng.gen_range(lo..hi).exp().max(1e-4);
            S::lit(softplus_inverse(dt))
        });
        let dt_proj = Linear::from_tensors(store, &format!("{name}.dt_proj"), dt_weight, Some(dt_bias))
            .expect("shapes built above");
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(&[di, n], |i| S::lit(((i % n) + 1) as f64).ln()),
        );
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::ones(&[di]));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, dm, false, rng);
        MambaBranch {
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            out_proj,
            d_inner: di,
            d_state: n,
            dt_rank: r,
        }
    }

    /// `[B, K, d_model] -> [B, K, d_model]`, scanning over the K tokens.
    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, e: Var<'t, S>) -> Result<Var<'t, S>> {
        let (di, n, r) = (self.d_inner, self.d_state, self.dt_rank);
        let xz = self.in_proj.forward(f, e)?;
        let x = xz.narrow(2, 0, di)?;
        let z = xz.narrow(2, di, di)?;
        let x = causal_depthwise_conv(x, f.param(self.conv_weight), f.param(self.conv_bias))?.silu();
        let dbc = self.x_proj.forward(f, x)?;
        let dt = dbc.narrow(2, 0, r)?;
        let b = dbc.narrow(2, r, n)?;
        let c = dbc.narrow(2, r + n, n)?;
        let delta = self.dt_proj.forward(f, dt)?.softplus();
        let a = f.param(self.a_log).exp().neg();
        let y = selective_scan(x, delta, a, b, c, f.param(self.d_skip))?;
        self.out_proj.forward(f, y.mul(z.silu())?)
    }
}

/// Forward and backward branches fused with a residual and layer norm,
/// followed by a position-wise feed-forward block.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub fwd: MambaBranch,
    pub bwd: MambaBranch,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl MambaLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &MambaConfig, rng: &mut ChaCha8Rng) -> Self {
        MambaLayer {
            fwd: MambaBranch::new(store, &format!("{name}.fwd"), cfg, rng),
            bwd: MambaBranch::new(store, &format!("{name}.bwd"), cfg, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model, LAYER_NORM_EPS),
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.d_ff, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, cfg.d_model, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model, LAYER_NORM_EPS),
            dropout: cfg.dropout,
        }
    }

    /// The same layer with the two scan directions exchanged.
    pub fn with_branches_swapped(&self) -> Self {
        MambaLayer {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
            ..self.clone()
        }
    }

    pub fn forward<'t, S: Scalar>(&self, f: &Forward<'t, S>, e: Var<'t, S>) -> Result<Var<'t, S>> {
        let h_fwd = self.fwd.forward(f, e)?;
        let h_bwd = self.bwd.forward(f, e.flip(1)?)?.flip(1)?;
        let fused = self.norm1.forward(f, e.add(h_fwd)?.add(h_bwd)?)?;
        let ffn = self.ff2.forward(f, self.ff1.forward(f, fused)?.gelu())?;
        self.norm2.forward(f, fused.add(f.dropout(ffn, self.dropout)?)?)
    }
}
