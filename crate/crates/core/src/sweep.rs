//! Ablation sweeps over mask count and module toggles.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::network::{build_model, Model, ENCODER_PREFIX, PRETRAIN_PREFIX};
use crate::train::{copy_params, train_stage, train_stages};

pub const MASK_COUNTS: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// `(enable_sfem, enable_hfs)` in table order: baseline first, full model last.
pub const COMPONENTS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Masks,
    Components,
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masks" => Ok(SweepKind::Masks),
            "components" => Ok(SweepKind::Components),
            _ => Err(Error::config("kind", format!("expected masks|components, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_masks: usize,
    pub enable_sfem: bool,
    pub enable_hfs: bool,
    /// Held-out metrics of the last sub-decoder.
    pub psnr_db: f64,
    pub ssim: f64,
    /// Held-out PSNR of the unrestored inputs.
    pub input_psnr_db: f64,
    pub config_hash: String,
}

/// Configurations visited by a sweep, derived from `base`. Each variant
/// writes into its own subdirectory of `base.out_dir`.
pub fn variants(kind: SweepKind, base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::new();
    match kind {
        SweepKind::Masks => {
            for n in MASK_COUNTS {
                let mut c = base.clone();
                c.model.n_masks = n;
                c.model.enable_hfs = true;
                c.out_dir = base.out_dir.join(format!("masks_{n}"));
                out.push(c);
            }
        }
        SweepKind::Components => {
            for (sfem, hfs) in COMPONENTS {
                let mut c = base.clone();
                c.model.enable_sfem = sfem;
                c.model.enable_hfs = hfs;
                c.out_dir = base
                    .out_dir
                    .join(format!("sfem_{}_hfs_{}", u8::from(sfem), u8::from(hfs)));
                out.push(c);
            }
        }
    }
    out
}

/// Trains every variant and reports held-out metrics. The encoder
/// pretraining stage does not depend on the swept settings, so it runs once
/// and is shared by all variants.
pub fn run_sweep(
    kind: SweepKind,
    base: &RunConfig,
    train: &[PairedSample],
    test: &[PairedSample],
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let mut pre_cfg = base.clone();
    pre_cfg.out_dir = base.out_dir.join("pretrain");
    let mut pretrained: Model<f32> = build_model(&base.model, base.seed)?;
    train_stage(&mut pretrained, &pre_cfg, 0, train, None, None)?;

    let mut rows = Vec::new();
    for cfg in variants(kind, base) {
        cfg.validate()?;
        let mut model: Model<f32> = build_model(&cfg.model, cfg.seed)?;
        copy_params(&mut model.store, &pretrained.store, &[ENCODER_PREFIX, PRETRAIN_PREFIX])?;
        let reports = train_stages(&mut model, &cfg, 1, train, test)?;
        let last = reports.last().expect("at least one sub-decoder");
        rows.push(SweepRow {
            n_masks: cfg.model.n_masks,
            enable_sfem: cfg.model.enable_sfem,
            enable_hfs: cfg.model.enable_hfs,
            psnr_db: last.test.mean_psnr,
            ssim: last.test.mean_ssim,
            input_psnr_db: last.test.input_psnr,
            config_hash: cfg.hash(),
        });
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

/// Markdown table in the layout of the corresponding ablation.
pub fn sweep_table(kind: SweepKind, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    match kind {
        SweepKind::Masks => {
            s.push_str("| n_m | PSNR (dB) | SSIM | config |\n|---:|---:|---:|---|\n");
            for r in rows {
                let _ = writeln!(s, "| {} | {:.2} | {:.4} | {} |", r.n_masks, r.psnr_db, r.ssim, r.config_hash);
            }
        }
        SweepKind::Components => {
            s.push_str("| SFEM | HFS | PSNR (dB) | SSIM | config |\n|:---:|:---:|---:|---:|---|\n");
            for r in rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.2} | {:.4} | {} |",
                    mark(r.enable_sfem),
                    mark(r.enable_hfs),
                    r.psnr_db,
                    r.ssim,
                    r.config_hash
                );
            }
        }
    }
    s
}

pub const SWEEP_CSV_HEADER: &str = "n_masks,enable_sfem,enable_hfs,psnr_db,ssim,input_psnr_db,config_hash";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            r.n_masks, r.enable_sfem, r.enable_hfs, r.psnr_db, r.ssim, r.input_psnr_db, r.config_hash
        );
    }
    s
}
