//! Five-scale encoder, stacked sub-decoders and the restoration forward pass.

use crate::autograd::Var;
use crate::blocks_frequency::{hfs_block_forward, HfsBlockParams, MaskMode};
use crate::blocks_spatial::{sfdh_block_forward, Pointwise, SfdhBlockParams, SfdhConfig, SfemConfig, SfemSplit};
use crate::error::{Error, Result};
use crate::ops::{self, conv::reflect_index};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Number of encoder/decoder scales.
pub const SCALES: usize = 5;
/// Spatial sizes must be divisible by this factor.
pub const SIZE_MULTIPLE: usize = 1 << (SCALES - 1);

pub const ENCODER_PREFIX: &str = "enc.";
pub const PRETRAIN_PREFIX: &str = "pre.";

/// Parameter-name prefix of sub-decoder `k` (1-based).
pub fn decoder_prefix(k: usize) -> String {
    format!("sd{k}.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks_per_level: usize,
    pub sub_decoders: usize,
    pub n_masks: usize,
    pub scales: usize,
    pub ffn_expansion: usize,
    pub decoupler_kernel: usize,
    pub enable_sfem: bool,
    pub enable_hfs: bool,
    /// One HFS block per decoder scale; otherwise only at the finest scale.
    pub hfs_every_scale: bool,
    pub encoder_blocks: usize,
    pub alpha_init: f64,
    pub sfem_split: SfemSplit,
    pub mask_mode: MaskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            blocks_per_level: 8,
            sub_decoders: 2,
            n_masks: 4,
            scales: SCALES,
            ffn_expansion: 2,
            decoupler_kernel: 3,
            enable_sfem: true,
            enable_hfs: true,
            hfs_every_scale: true,
            encoder_blocks: 1,
            alpha_init: 0.8,
            sfem_split: SfemSplit::Expand,
            mask_mode: MaskMode::Exclude,
        }
    }
}

impl ModelConfig {
    /// CPU-sized variant: `C = 16`, two blocks per level, two sub-decoders.
    pub fn desk() -> Self {
        Self {
            blocks_per_level: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("blocks_per_level", self.blocks_per_level),
            ("sub_decoders", self.sub_decoders),
            ("ffn_expansion", self.ffn_expansion),
            ("encoder_blocks", self.encoder_blocks),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.scales != SCALES {
            return Err(Error::config("scales", format!("only {SCALES} scales are supported")));
        }
        if self.decoupler_kernel.is_multiple_of(2) {
            return Err(Error::config("decoupler_kernel", "must be odd"));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::config("alpha_init", "must be finite"));
        }
        if self.enable_sfem && self.sfem_split == SfemSplit::Partition && !self.base_channels.is_multiple_of(5) {
            return Err(Error::config("sfem_split", "partition needs base_channels divisible by 5"));
        }
        Ok(())
    }

    /// Channel width at scale `i` (1-based).
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }
}

/// A conv with its stride and zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero: bool,
        seed: u64,
    ) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * k * k) };
        Ok(Self {
            weight: store.init(&format!("{name}.w"), &[cout, cin, k, k], init, seed)?,
            bias: store.init(&format!("{name}.b"), &[cout], Init::Zeros, seed)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        ops::conv2d(x, &ctx.p(self.weight), Some(&ctx.p(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderState {
    pub stem: Conv,
    /// `blocks[i]` holds the blocks of scale `i + 1`.
    pub blocks: Vec<Vec<SfdhBlockParams>>,
    pub down: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct DecoderScale {
    pub fuse: Pointwise,
    pub blocks: Vec<SfdhBlockParams>,
    pub hfs: Option<HfsBlockParams>,
    /// Upsampling from scale `i + 1`; absent at the coarsest scale.
    pub up: Option<Pointwise>,
}

#[derive(Clone, Debug)]
pub struct SubDecoderState {
    pub prefix: String,
    /// `scales[i]` is scale `i + 1`.
    pub scales: Vec<DecoderScale>,
    pub head: Conv,
}

/// Model structure plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub encoder: EncoderState,
    /// Baseline decoder used only while pretraining the encoder.
    pub pretrain_decoder: SubDecoderState,
    pub sub_decoders: Vec<SubDecoderState>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            pretrain_decoder: self.pretrain_decoder.clone(),
            sub_decoders: self.sub_decoders.clone(),
            store: self.store.cast(),
        }
    }
}

fn sfdh_config(cfg: &ModelConfig, c: usize, sfem: bool) -> SfdhConfig {
    SfdhConfig {
        channels: c,
        ffn_expansion: cfg.ffn_expansion,
        sfem: sfem.then_some(SfemConfig {
            channels: c,
            alpha_init: cfg.alpha_init,
            split: cfg.sfem_split,
        }),
    }
}

fn build_decoder<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    blocks: usize,
    sfem: bool,
    hfs: bool,
    seed: u64,
) -> Result<SubDecoderState> {
    let mut scales = Vec::with_capacity(SCALES);
    for i in 1..=SCALES {
        let c = cfg.width(i);
        let name = format!("{prefix}s{i}");
        let fuse_in = if i == SCALES { 2 * c } else { 3 * c };
        let blocks = (0..blocks)
            .map(|j| SfdhBlockParams::new(store, &format!("{name}.b{j}"), &sfdh_config(cfg, c, sfem), seed))
            .collect::<Result<Vec<_>>>()?;
        let hfs = if hfs && cfg.n_masks > 0 && (cfg.hfs_every_scale || i == 1) {
            Some(HfsBlockParams::new(
                store,
                &format!("{name}.hfs"),
                c,
                cfg.n_masks,
                cfg.decoupler_kernel,
                cfg.mask_mode,
                seed,
            )?)
        } else {
            None
        };
        let up = if i < SCALES {
            Some(Pointwise::new(store, &format!("{name}.up"), 2 * c, 4 * c, true, seed)?)
        } else {
            None
        };
        scales.push(DecoderScale {
            fuse: Pointwise::new(store, &format!("{name}.fuse"), fuse_in, c, true, seed)?,
            blocks,
            hfs,
            up,
        });
    }
    let head = Conv::new(store, &format!("{prefix}head"), cfg.base_channels, 3, 3, 1, 1, true, seed)?;
    Ok(SubDecoderState {
        prefix: prefix.to_string(),
        scales,
        head,
    })
}

/// Deterministic construction: every tensor depends only on `(seed, name)`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let c = cfg.base_channels;
    let stem = Conv::new(&mut store, "enc.stem", 3, c, 3, 1, 1, false, seed)?;
    let mut blocks = Vec::new();
    let mut down = Vec::new();
    for i in 1..=SCALES {
        let ci = cfg.width(i);
        blocks.push(
            (0..cfg.encoder_blocks)
                .map(|j| {
                    SfdhBlockParams::new(&mut store, &format!("enc.s{i}.b{j}"), &sfdh_config(cfg, ci, false), seed)
                })
                .collect::<Result<Vec<_>>>()?,
        );
        if i < SCALES {
            down.push(Conv::new(&mut store, &format!("enc.down{i}"), ci, 2 * ci, 2, 2, 0, false, seed)?);
        }
    }
    let encoder = EncoderState { stem, blocks, down };
    let pretrain_decoder = build_decoder(&mut store, cfg, PRETRAIN_PREFIX, 1, false, false, seed)?;
    let sub_decoders = (1..=cfg.sub_decoders)
        .map(|k| {
            build_decoder(
                &mut store,
                cfg,
                &decoder_prefix(k),
                cfg.blocks_per_level,
                cfg.enable_sfem,
                cfg.enable_hfs,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        cfg: cfg.clone(),
        encoder,
        pretrain_decoder,
        sub_decoders,
        store,
    })
}

fn check_image<T: Scalar>(img: &Var<T>) -> Result<()> {
    match img.shape() {
        [_, 3, h, w] if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 && *h > 0 && *w > 0 => Ok(()),
        [_, 3, h, w] => Err(Error::config(
            "image",
            format!("{h}x{w} is not divisible by {SIZE_MULTIPLE}; pad first"),
        )),
        s => Err(Error::Shape(format!("expected (B, 3, H, W) image, got {s:?}"))),
    }
}

pub struct EncoderOutput<T: Scalar> {
    /// Shallow stem features.
    pub f: Var<T>,
    /// Per-scale features, finest first.
    pub e: Vec<Var<T>>,
}

pub fn encoder_forward<T: Scalar>(ctx: &Ctx<T>, enc: &EncoderState, img: &Var<T>) -> Result<EncoderOutput<T>> {
    check_image(img)?;
    let f = enc.stem.forward(ctx, img);
    let mut x = f.clone();
    let mut e = Vec::with_capacity(SCALES);
    for (i, blocks) in enc.blocks.iter().enumerate() {
        for b in blocks {
            x = sfdh_block_forward(ctx, &x, b)?;
        }
        e.push(x.clone());
        if let Some(down) = enc.down.get(i) {
            x = down.forward(ctx, &x);
        }
    }
    Ok(EncoderOutput { f, e })
}

/// Runs one sub-decoder from the coarsest to the finest scale. Returns the
/// new per-scale features and `X + I` (unclamped).
pub fn sub_decoder_forward<T: Scalar>(
    ctx: &Ctx<T>,
    sd: &SubDecoderState,
    prev: &[Var<T>],
    e: &[Var<T>],
    img: &Var<T>,
) -> Result<(Vec<Var<T>>, Var<T>)> {
    if prev.len() != SCALES || e.len() != SCALES || sd.scales.len() != SCALES {
        return Err(Error::config(
            "scales",
            format!(
                "expected {SCALES} scales, got prev {} / encoder {} / decoder {}",
                prev.len(),
                e.len(),
                sd.scales.len()
            ),
        ));
    }
    let mut d: Vec<Option<Var<T>>> = vec![None; SCALES];
    for i in (0..SCALES).rev() {
        let s = &sd.scales[i];
        let mut x = match (&s.up, d.get(i + 1).and_then(|v| v.as_ref())) {
            (Some(up), Some(coarser)) => {
                let u = ops::pixel_shuffle2(&up.forward(ctx, coarser));
                s.fuse.forward(ctx, &ops::concat_channels(&[&e[i], &prev[i], &u]))
            }
            _ => s.fuse.forward(ctx, &ops::concat_channels(&[&e[i], &prev[i]])),
        };
        for b in &s.blocks {
            x = sfdh_block_forward(ctx, &x, b)?;
        }
        if let Some(h) = &s.hfs {
            x = hfs_block_forward(ctx, &x, h)?;
        }
        d[i] = Some(x);
    }
    let d: Vec<Var<T>> = d.into_iter().map(|v| v.expect("every scale visited")).collect();
    let residual = sd.head.forward(ctx, &d[0]);
    let restored = ops::add(&residual, img);
    Ok((d, restored))
}

/// Restored images of every sub-decoder, in order.
pub fn aibnet_forward<T: Scalar>(ctx: &Ctx<T>, model: &Model<T>, img: &Var<T>) -> Result<Vec<Var<T>>> {
    forward_through(ctx, model, img, model.sub_decoders.len())
}

/// Restored images of sub-decoders `1..=upto`.
pub fn forward_through<T: Scalar>(ctx: &Ctx<T>, model: &Model<T>, img: &Var<T>, upto: usize) -> Result<Vec<Var<T>>> {
    if upto > model.sub_decoders.len() {
        return Err(Error::config(
            "stage",
            format!("model has {} sub-decoders, asked for {upto}", model.sub_decoders.len()),
        ));
    }
    let enc = encoder_forward(ctx, &model.encoder, img)?;
    let mut prev = enc.e.clone();
    let mut outs = Vec::with_capacity(upto);
    for sd in &model.sub_decoders[..upto] {
        let (d, out) = sub_decoder_forward(ctx, sd, &prev, &enc.e, img)?;
        prev = d;
        outs.push(out);
    }
    Ok(outs)
}

/// Output trained at `stage`: the pretraining decoder for stage 0, sub-decoder
/// `stage` otherwise.
pub fn stage_output<T: Scalar>(ctx: &Ctx<T>, model: &Model<T>, img: &Var<T>, stage: usize) -> Result<Var<T>> {
    if stage == 0 {
        let enc = encoder_forward(ctx, &model.encoder, img)?;
        let (_, out) = sub_decoder_forward(ctx, &model.pretrain_decoder, &enc.e, &enc.e, img)?;
        return Ok(out);
    }
    if stage > model.sub_decoders.len() {
        return Err(Error::config(
            "stage",
            format!("stage {stage} exceeds {} sub-decoders", model.sub_decoders.len()),
        ));
    }
    Ok(forward_through(ctx, model, img, stage)?.pop().expect("stage >= 1"))
}

/// Parameter-name prefixes that are trainable at `stage`.
pub fn stage_prefixes(stage: usize) -> Vec<String> {
    if stage == 0 {
        vec![ENCODER_PREFIX.to_string(), PRETRAIN_PREFIX.to_string()]
    } else {
        vec![decoder_prefix(stage)]
    }
}

/// Reflect-pads `(B, C, H, W)` on the bottom/right to multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[b, c, hp, wp]);
    let od = out.data_mut();
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..hp {
            let sy = reflect_index(y as isize, h);
            for xx in 0..wp {
                od[(p * hp + y) * wp + xx] = src[sy * w + reflect_index(xx as isize, w)];
            }
        }
    }
    out
}

/// Keeps the top-left `h x w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, c, hp, wp) = x.dims4();
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let od = out.data_mut();
    for p in 0..b * c {
        for y in 0..h {
            od[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&x.data()[(p * hp + y) * wp..][..w]);
        }
    }
    out
}

/// Restores an image of any size with the output of `stage`, clamped to `[0, 1]`.
pub fn restore<T: Scalar>(model: &Model<T>, img: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.dims4();
    let padded = pad_to_multiple(img, SIZE_MULTIPLE);
    let ctx = Ctx::eval(&model.store);
    let out = stage_output(&ctx, model, &Var::constant(padded), stage)?;
    Ok(crop(out.value(), h, w).map(|v| v.max(T::zero()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(s: usize) -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            blocks_per_level: 1,
            sub_decoders: s,
            n_masks: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn invalid_fields_named() {
        for (cfg, field) in [
            (ModelConfig { sub_decoders: 0, ..toy(1) }, "sub_decoders"),
            (ModelConfig { blocks_per_level: 0, ..toy(1) }, "blocks_per_level"),
            (ModelConfig { scales: 4, ..toy(1) }, "scales"),
            (ModelConfig { decoupler_kernel: 4, ..toy(1) }, "decoupler_kernel"),
        ] {
            match build_model::<f32>(&cfg, 0) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f.as_str(), field),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 5, 7], |i| i as f64);
        let p = pad_to_multiple(&x, 16);
        assert_eq!(p.shape(), &[1, 3, 16, 16]);
        assert_eq!(p.at(0, 0, 0, 7), x.at(0, 0, 0, 5));
        assert_eq!(crop(&p, 5, 7), x);
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = build_model::<f32>(&toy(1), 0).unwrap();
        let ctx = Ctx::eval(&m.store);
        let img = Var::constant(Tensor::zeros(&[1, 3, 20, 16]));
        assert!(encoder_forward(&ctx, &m.encoder, &img).is_err());
    }
}
