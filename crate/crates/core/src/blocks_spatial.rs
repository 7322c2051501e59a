//! Spatial-domain blocks: layer norm, simple gate, simple channel attention,
//! the differential channel-attention module and the block that fuses them.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Variance floor used by every layer norm in the network.
pub const LN_EPS: f64 = 1e-6;
/// Added to `|beta|` so the attention temperature is strictly positive.
pub const TEMPERATURE_EPS: f64 = 1e-6;

/// How the projected features are divided into the five attention operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfemSplit {
    /// Project `C -> 5C`; every operand keeps `C` channels.
    Expand,
    /// Project `C -> C` and cut it into five `C/5`-channel parts.
    Partition,
}

impl std::str::FromStr for SfemSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expand" => Ok(Self::Expand),
            "partition" => Ok(Self::Partition),
            _ => Err(Error::config("sfem_split", format!("expected expand|partition, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for SfemSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Expand => "expand",
            Self::Partition => "partition",
        })
    }
}

pub fn layer_norm<T: Scalar>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Result<Var<T>> {
    layer_norm_eps(x, scale, shift, LN_EPS)
}

pub fn layer_norm_eps<T: Scalar>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>, eps: f64) -> Result<Var<T>> {
    let c = channels_of(x)?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::config(
            "layer_norm",
            format!(
                "scale {:?} / shift {:?} do not match {c} channels",
                scale.shape(),
                shift.shape()
            ),
        ));
    }
    Ok(ops::layer_norm_channels(x, scale, shift, eps))
}

pub fn simple_gate<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let c = channels_of(x)?;
    if c % 2 != 0 {
        return Err(Error::config("simple_gate", format!("odd channel count {c}")));
    }
    Ok(ops::simple_gate(x))
}

fn channels_of<T: Scalar>(x: &Var<T>) -> Result<usize> {
    match x.shape() {
        [_, c, _, _] => Ok(*c),
        s => Err(Error::Shape(format!("expected (B, C, H, W), got {s:?}"))),
    }
}

/// Pointwise convolution weights with a bias.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Pointwise {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.init(&format!("{name}.w"), &[cout, cin, 1, 1], Init::FanIn(cin), seed)?,
            bias: if bias {
                Some(store.init(&format!("{name}.b"), &[cout], Init::Zeros, seed)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let b = self.bias.map(|b| ctx.p(b));
        ops::conv2d(x, &ctx.p(self.weight), b.as_ref(), 1, 0)
    }
}

/// 3x3 depthwise convolution with a bias and zero padding.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Depthwise {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            weight: store.init(&format!("{name}.w"), &[c, 1, 3, 3], Init::FanIn(9), seed)?,
            bias: store.init(&format!("{name}.b"), &[c], Init::Zeros, seed)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        ops::depthwise_conv2d(x, &ctx.p(self.weight), Some(&ctx.p(self.bias)), Padding::Zero)
    }
}

/// Simple channel attention: `x * conv1x1(mean_hw(x))`.
#[derive(Clone, Debug)]
pub struct ScaParams {
    pub conv: Pointwise,
}

impl ScaParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            conv: Pointwise::new(store, name, c, c, true, seed)?,
        })
    }
}

pub fn sca<T: Scalar>(ctx: &Ctx<T>, x: &Var<T>, p: &ScaParams) -> Var<T> {
    let pooled = ops::global_avg_pool(x);
    let gate = p.conv.forward(ctx, &pooled);
    ops::mul_channelwise(x, &gate)
}

#[derive(Clone, Debug)]
pub struct SfemConfig {
    pub channels: usize,
    pub alpha_init: f64,
    pub split: SfemSplit,
}

/// Parameters of the differential channel-attention module.
#[derive(Clone, Debug)]
pub struct SfemParams {
    pub name: String,
    pub channels: usize,
    pub split: SfemSplit,
    pub proj_in: Pointwise,
    pub dw: Depthwise,
    /// Bias-free, so identical branches cancel exactly.
    pub proj_out: Pointwise,
    pub beta: ParamId,
    pub alpha_q1: ParamId,
    pub alpha_k1: ParamId,
    pub alpha_q2: ParamId,
    pub alpha_k2: ParamId,
    pub alpha_init: f64,
}

impl SfemParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &SfemConfig, seed: u64) -> Result<Self> {
        let c = cfg.channels;
        let (projected, part) = match cfg.split {
            SfemSplit::Expand => (5 * c, c),
            SfemSplit::Partition => {
                if !c.is_multiple_of(5) {
                    return Err(Error::config(
                        "sfem_split",
                        format!("partition needs channels divisible by 5, got {c}"),
                    ));
                }
                (c, c / 5)
            }
        };
        let scalar = |store: &mut ParamStore<T>, n: &str, init| store.init(&format!("{name}.{n}"), &[1], init, seed);
        Ok(Self {
            name: name.to_string(),
            channels: c,
            split: cfg.split,
            proj_in: Pointwise::new(store, &format!("{name}.proj_in"), c, projected, true, seed)?,
            dw: Depthwise::new(store, &format!("{name}.dw"), projected, seed)?,
            proj_out: Pointwise::new(store, &format!("{name}.proj_out"), part, c, false, seed)?,
            beta: scalar(store, "beta", Init::Const((part as f64).sqrt()))?,
            alpha_q1: scalar(store, "alpha_q1", Init::Zeros)?,
            alpha_k1: scalar(store, "alpha_k1", Init::Zeros)?,
            alpha_q2: scalar(store, "alpha_q2", Init::Zeros)?,
            alpha_k2: scalar(store, "alpha_k2", Init::Zeros)?,
            alpha_init: cfg.alpha_init,
        })
    }
}

/// The differential weight `exp(aq1 * ak1) - exp(aq2 * ak2) + alpha_init`.
pub fn alpha_value<T: Scalar>(ctx: &Ctx<T>, p: &SfemParams) -> Var<T> {
    ops::alpha_value(
        &ctx.p(p.alpha_q1),
        &ctx.p(p.alpha_k1),
        &ctx.p(p.alpha_q2),
        &ctx.p(p.alpha_k2),
        p.alpha_init,
    )
}

/// Differential channel attention on the normalized input `x_n`.
pub fn sfem_forward<T: Scalar>(ctx: &Ctx<T>, x_n: &Var<T>, p: &SfemParams) -> Result<Var<T>> {
    let c = channels_of(x_n)?;
    if c != p.channels {
        return Err(Error::config(
            "sfem",
            format!("input has {c} channels, parameters expect {}", p.channels),
        ));
    }
    let projected = p.dw.forward(ctx, &p.proj_in.forward(ctx, x_n));
    let pc = projected.shape()[1];
    if !pc.is_multiple_of(5) {
        return Err(Error::config("sfem", format!("{pc} projected channels do not split into five parts")));
    }
    let parts = ops::split_channels(&projected, 5);
    let (q1, k1, q2, k2, v) = (&parts[0], &parts[1], &parts[2], &parts[3], &parts[4]);
    let beta = ctx.p(p.beta);
    let att1 = ops::softmax_rows(&ops::div_abs(&ops::channel_gram(q1, k1), &beta, TEMPERATURE_EPS), None);
    let att2 = ops::softmax_rows(&ops::div_abs(&ops::channel_gram(q2, k2), &beta, TEMPERATURE_EPS), None);
    let alpha = alpha_value(ctx, p);
    if ctx.probing() {
        ctx.record(format!("{}.att1", p.name), att1.value());
        ctx.record(format!("{}.att2", p.name), att2.value());
        ctx.record(format!("{}.alpha", p.name), alpha.value());
    }
    let diff = ops::sub(&att1, &ops::mul_scalar(&att2, &alpha));
    Ok(p.proj_out.forward(ctx, &ops::attend(&diff, v)))
}

#[derive(Clone, Debug)]
pub struct SfdhConfig {
    pub channels: usize,
    /// FFN expansion factor; the gated width is `ffn_expansion * channels`.
    pub ffn_expansion: usize,
    /// `None` builds the SCA-only baseline block.
    pub sfem: Option<SfemConfig>,
}

#[derive(Clone, Debug)]
pub struct SfemBranch {
    pub sfem: SfemParams,
    /// Learnable fusion weight of the differential branch.
    pub w_fuse: ParamId,
}

#[derive(Clone, Debug)]
pub struct SfdhBlockParams {
    pub channels: usize,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub sca: ScaParams,
    pub sfem: Option<SfemBranch>,
    pub ffn_in: Pointwise,
    pub ffn_dw: Depthwise,
    pub ffn_out: Pointwise,
}

impl SfdhBlockParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &SfdhConfig, seed: u64) -> Result<Self> {
        let c = cfg.channels;
        if c == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        let ce = cfg.ffn_expansion * c;
        if ce == 0 {
            return Err(Error::config("ffn_expansion", "must be positive"));
        }
        let ln = |store: &mut ParamStore<T>, n: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.init(&format!("{name}.{n}.scale"), &[c], Init::Ones, seed)?,
                store.init(&format!("{name}.{n}.shift"), &[c], Init::Zeros, seed)?,
            ))
        };
        let sfem = match &cfg.sfem {
            Some(sc) => Some(SfemBranch {
                sfem: SfemParams::new(store, &format!("{name}.sfem"), sc, seed)?,
                w_fuse: store.init(&format!("{name}.w_fuse"), &[1], Init::Ones, seed)?,
            }),
            None => None,
        };
        Ok(Self {
            channels: c,
            ln1: ln(store, "ln1")?,
            ln2: ln(store, "ln2")?,
            sca: ScaParams::new(store, &format!("{name}.sca"), c, seed)?,
            sfem,
            ffn_in: Pointwise::new(store, &format!("{name}.ffn_in"), c, 2 * ce, true, seed)?,
            ffn_dw: Depthwise::new(store, &format!("{name}.ffn_dw"), 2 * ce, seed)?,
            ffn_out: Pointwise::new(store, &format!("{name}.ffn_out"), ce, c, true, seed)?,
        })
    }
}

/// `X' = x + SCA(LN(x)) + W * SFEM(LN(x))`, then `X' + FFN(LN(X'))`.
pub fn sfdh_block_forward<T: Scalar>(ctx: &Ctx<T>, x: &Var<T>, p: &SfdhBlockParams) -> Result<Var<T>> {
    let x_n = layer_norm(x, &ctx.p(p.ln1.0), &ctx.p(p.ln1.1))?;
    let mut mid = ops::add(x, &sca(ctx, &x_n, &p.sca));
    if let Some(branch) = &p.sfem {
        let enhanced = sfem_forward(ctx, &x_n, &branch.sfem)?;
        mid = ops::add(&mid, &ops::mul_scalar(&enhanced, &ctx.p(branch.w_fuse)));
    }
    let h = layer_norm(&mid, &ctx.p(p.ln2.0), &ctx.p(p.ln2.1))?;
    let h = p.ffn_dw.forward(ctx, &p.ffn_in.forward(ctx, &h));
    let h = p.ffn_out.forward(ctx, &simple_gate(&h)?);
    Ok(ops::add(&mid, &h))
}
