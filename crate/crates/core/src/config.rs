//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::KernelRanges;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::ModelConfig;
use crate::params::fnv1a;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub patch: usize,
    /// Budget shared by all stages.
    pub total_iters: usize,
    /// Fraction of `total_iters` spent pretraining the encoder.
    pub pretrain_fraction: f64,
    /// Overrides the per-stage budget of stages `>= 1` when set.
    pub iters_per_stage: Option<usize>,
    /// Overrides the stage-0 budget when set.
    pub pretrain_iters: Option<usize>,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_final: 1e-7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch: 8,
            patch: 64,
            total_iters: 5000,
            pretrain_fraction: 0.2,
            iters_per_stage: None,
            pretrain_iters: None,
            grad_clip: 1.0,
            checkpoint_every: 500,
            keep_checkpoints: 2,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset root holding `{train,test}/{blur,sharp}`.
    pub data_dir: PathBuf,
    /// Optional folder of sharp source images for `gen-data`.
    pub sharp_dir: Option<PathBuf>,
    pub count: usize,
    pub image_size: usize,
    pub kernels: KernelRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            sharp_dir: None,
            count: 8,
            image_size: 64,
            kernels: KernelRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Checkpoints, metrics and reports are written here.
    pub out_dir: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            deterministic: true,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, l, t, d) = (&mut self.model, &mut self.loss, &mut self.train, &mut self.data);
        match key {
            "base_channels" => m.base_channels = parse(key, v)?,
            "blocks_per_level" => m.blocks_per_level = parse(key, v)?,
            "sub_decoders" => m.sub_decoders = parse(key, v)?,
            "n_masks" => m.n_masks = parse(key, v)?,
            "scales" => m.scales = parse(key, v)?,
            "ffn_expansion" => m.ffn_expansion = parse(key, v)?,
            "decoupler_kernel" => m.decoupler_kernel = parse(key, v)?,
            "enable_sfem" => m.enable_sfem = parse_bool(key, v)?,
            "enable_hfs" => m.enable_hfs = parse_bool(key, v)?,
            "hfs_every_scale" => m.hfs_every_scale = parse_bool(key, v)?,
            "encoder_blocks" => m.encoder_blocks = parse(key, v)?,
            "alpha_init" => m.alpha_init = parse(key, v)?,
            "sfem_split" => m.sfem_split = v.parse()?,
            "mask_mode" => m.mask_mode = v.parse()?,
            "epsilon" => l.epsilon = parse(key, v)?,
            "delta" => l.delta = parse(key, v)?,
            "lambda_f" => l.lambda_f = parse(key, v)?,
            "loss_form" => l.form = v.parse()?,
            "lr_init" => t.lr_init = parse(key, v)?,
            "lr_final" => t.lr_final = parse(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "patch" => t.patch = parse(key, v)?,
            "total_iters" => t.total_iters = parse(key, v)?,
            "pretrain_fraction" => t.pretrain_fraction = parse(key, v)?,
            "iters_per_stage" => t.iters_per_stage = parse_opt(key, v)?,
            "pretrain_iters" => t.pretrain_iters = parse_opt(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "keep_checkpoints" => t.keep_checkpoints = parse(key, v)?,
            "log_every" => t.log_every = parse(key, v)?,
            "data_dir" => d.data_dir = PathBuf::from(v),
            "sharp_dir" => d.sharp_dir = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "count" => d.count = parse(key, v)?,
            "image_size" => d.image_size = parse(key, v)?,
            "kernel_length_min" => d.kernels.length.0 = parse(key, v)?,
            "kernel_length_max" => d.kernels.length.1 = parse(key, v)?,
            "kernel_size" => d.kernels.kernel_size = parse(key, v)?,
            "curvature_min" => d.kernels.curvature.0 = parse(key, v)?,
            "curvature_max" => d.kernels.curvature.1 = parse(key, v)?,
            "noise_min" => d.kernels.noise.0 = parse(key, v)?,
            "noise_max" => d.kernels.noise.1 = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, l, t, d) = (&self.model, &self.loss, &self.train, &self.data);
        let path = |p: &Path| p.display().to_string();
        vec![
            ("base_channels", m.base_channels.to_string()),
            ("blocks_per_level", m.blocks_per_level.to_string()),
            ("sub_decoders", m.sub_decoders.to_string()),
            ("n_masks", m.n_masks.to_string()),
            ("scales", m.scales.to_string()),
            ("ffn_expansion", m.ffn_expansion.to_string()),
            ("decoupler_kernel", m.decoupler_kernel.to_string()),
            ("enable_sfem", m.enable_sfem.to_string()),
            ("enable_hfs", m.enable_hfs.to_string()),
            ("hfs_every_scale", m.hfs_every_scale.to_string()),
            ("encoder_blocks", m.encoder_blocks.to_string()),
            ("alpha_init", m.alpha_init.to_string()),
            ("sfem_split", m.sfem_split.to_string()),
            ("mask_mode", m.mask_mode.to_string()),
            ("epsilon", l.epsilon.to_string()),
            ("delta", l.delta.to_string()),
            ("lambda_f", l.lambda_f.to_string()),
            ("loss_form", l.form.to_string()),
            ("lr_init", t.lr_init.to_string()),
            ("lr_final", t.lr_final.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("batch", t.batch.to_string()),
            ("patch", t.patch.to_string()),
            ("total_iters", t.total_iters.to_string()),
            ("pretrain_fraction", t.pretrain_fraction.to_string()),
            ("iters_per_stage", show_opt(t.iters_per_stage)),
            ("pretrain_iters", show_opt(t.pretrain_iters)),
            ("grad_clip", t.grad_clip.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("keep_checkpoints", t.keep_checkpoints.to_string()),
            ("log_every", t.log_every.to_string()),
            ("data_dir", path(&d.data_dir)),
            ("sharp_dir", d.sharp_dir.as_deref().map_or_else(|| "none".to_string(), path)),
            ("count", d.count.to_string()),
            ("image_size", d.image_size.to_string()),
            ("kernel_length_min", d.kernels.length.0.to_string()),
            ("kernel_length_max", d.kernels.length.1.to_string()),
            ("kernel_size", d.kernels.kernel_size.to_string()),
            ("curvature_min", d.kernels.curvature.0.to_string()),
            ("curvature_max", d.kernels.curvature.1.to_string()),
            ("noise_min", d.kernels.noise.0.to_string()),
            ("noise_max", d.kernels.noise.1.to_string()),
            ("out_dir", path(&self.out_dir)),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hash of every setting except output location, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if k != "out_dir" {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        format!("{:016x}", fnv1a(s.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.kernels.validate()?;
        let t = &self.train;
        if !(t.lr_final >= 0.0 && t.lr_final <= t.lr_init) {
            return Err(Error::config("lr_final", "must satisfy 0 <= lr_final <= lr_init"));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::config("adam_beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&t.pretrain_fraction) {
            return Err(Error::config("pretrain_fraction", "must lie in [0, 1]"));
        }
        for (field, v) in [("batch", t.batch), ("patch", t.patch), ("image_size", self.data.image_size)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if t.grad_clip < 0.0 {
            return Err(Error::config("grad_clip", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Keys that describe the model architecture.
pub const MODEL_KEYS: [&str; 14] = [
    "base_channels",
    "blocks_per_level",
    "sub_decoders",
    "n_masks",
    "scales",
    "ffn_expansion",
    "decoupler_kernel",
    "enable_sfem",
    "enable_hfs",
    "hfs_every_scale",
    "encoder_blocks",
    "alpha_init",
    "sfem_split",
    "mask_mode",
];

pub fn model_to_text(m: &ModelConfig) -> String {
    let cfg = RunConfig {
        model: m.clone(),
        ..RunConfig::default()
    };
    let mut s = String::new();
    for (k, v) in cfg.entries() {
        if MODEL_KEYS.contains(&k) {
            let _ = writeln!(s, "{k} = {v}");
        }
    }
    s
}

/// Parses architecture keys only; any other key is rejected.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad model line `{line}`")))?;
        let k = k.trim();
        if !MODEL_KEYS.contains(&k) {
            return Err(Error::Checkpoint(format!("unexpected model key `{k}`")));
        }
        cfg.set(k, v)?;
    }
    Ok(cfg.model)
}
