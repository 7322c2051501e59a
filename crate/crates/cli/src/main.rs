mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aibnet_core::checkpoint::Checkpoint;
use aibnet_core::config::RunConfig;
use aibnet_core::data::{load_png, load_split, make_dataset, save_png, DatasetSpec, PairedSample, Split};
use aibnet_core::gradcheck::{gradcheck, GradTarget};
use aibnet_core::inspect;
use aibnet_core::network::{build_model, restore, Model};
use aibnet_core::sweep::{run_sweep, sweep_csv, sweep_table, SweepKind};
use aibnet_core::train::{append_metrics, evaluate, train_stage, RunPaths};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "aibnet", version, about = "Train, evaluate and inspect AIBNet deblurring models")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, reproducible execution. Accepts an optional true/false.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set batch=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a paired blurred/sharp dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Blur these sharp images instead of synthesizing new ones.
        #[arg(long)]
        sharp_dir: Option<PathBuf>,
    },
    /// Stage 0: train the encoder with a temporary decoder.
    PretrainEncoder {
        #[arg(long)]
        pretrain_iters: Option<usize>,
        /// Continue from the latest periodic checkpoint of the stage.
        #[arg(long)]
        resume: bool,
    },
    /// Train one stage, or every stage in order when `--stage` is omitted.
    Train {
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long)]
        iters_per_stage: Option<usize>,
        #[arg(long)]
        pretrain_iters: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset split and append to the metrics CSV.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Deblur a single PNG.
    Infer {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// sfem, sfdh, hfs, decoupler, losses, end2end or all.
        #[arg(long, default_value = "all")]
        target: String,
        /// Maximum relative error; defaults to the per-target tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train a family of ablation variants and report a table.
    Sweep {
        #[arg(long)]
        kind: String,
    },
    /// Write attention maps and mask supports for one image as CSV.
    DumpAttn {
        input: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Defaults to `<out_dir>/attn`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Render loss and PSNR curves of a run to PNG.
    Plot {
        /// Defaults to `<out_dir>/curves.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Defaults to the final checkpoint of the highest finished stage.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which output to use; defaults to the checkpoint's stage.
    #[arg(long)]
    stage: Option<usize>,
}

/// A command-line or configuration problem, reported with exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Checks ran but did not pass; exit code 2.
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(mut c) => {
            c.overrides = all_overrides(&args);
            c
        }
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if code != EXIT_VERIFY {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}

/// Every `--set` value in command-line order. Clap keeps only the
/// occurrences on one side of the subcommand for global list arguments.
fn all_overrides(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--set" {
            out.extend(it.next().cloned());
        } else if let Some(v) = a.strip_prefix("--set=") {
            out.push(v.to_string());
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_VERIFY;
    }
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<aibnet_core::Error>() {
        Some(aibnet_core::Error::Config { .. } | aibnet_core::Error::Parse(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.deterministic {
        cfg.deterministic = d;
    }
    if let Some(p) = &cli.out_dir {
        cfg.out_dir = p.clone();
    }
    if let Some(p) = &cli.data_dir {
        cfg.data.data_dir = p.clone();
    }
    match &cli.command {
        Command::GenData {
            count,
            image_size,
            sharp_dir,
        } => {
            set_opt(&mut cfg.data.count, *count);
            set_opt(&mut cfg.data.image_size, *image_size);
            if sharp_dir.is_some() {
                cfg.data.sharp_dir = sharp_dir.clone();
            }
        }
        Command::PretrainEncoder { pretrain_iters, .. } => {
            if pretrain_iters.is_some() {
                cfg.train.pretrain_iters = *pretrain_iters;
            }
        }
        Command::Train {
            iters_per_stage,
            pretrain_iters,
            ..
        } => {
            if iters_per_stage.is_some() {
                cfg.train.iters_per_stage = *iters_per_stage;
            }
            if pretrain_iters.is_some() {
                cfg.train.pretrain_iters = *pretrain_iters;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_opt<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&cfg),
        Command::PretrainEncoder { resume, .. } => train_one(&cfg, 0, *resume),
        Command::Train { stage, resume, .. } => match stage {
            Some(k) => train_one(&cfg, *k, *resume),
            None => {
                if *resume {
                    bail!(usage("--resume needs --stage"));
                }
                for k in 0..=cfg.model.sub_decoders {
                    train_one(&cfg, k, false)?;
                }
                Ok(())
            }
        },
        Command::Eval { model, split } => eval(&cfg, model, split),
        Command::Infer { input, output, model } => infer(&cfg, model, input, output),
        Command::Gradcheck { target, tol } => run_gradcheck(&cfg, target, *tol),
        Command::Sweep { kind } => sweep(&cfg, kind),
        Command::DumpAttn { input, model, dir } => dump_attn(&cfg, model, input, dir.as_deref()),
        Command::Plot { output } => {
            let out = output.clone().unwrap_or_else(|| cfg.out_dir.join("curves.png"));
            plot::render(&RunPaths::new(&cfg.out_dir), &out)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        sharp_dir: cfg.data.sharp_dir.as_deref(),
        out_dir: &cfg.data.data_dir,
        count: cfg.data.count,
        size: cfg.data.image_size,
        ranges: cfg.data.kernels.clone(),
        seed: cfg.seed,
    };
    let entries = make_dataset(&spec)?;
    println!("wrote {} pairs to {}", entries.len(), cfg.data.data_dir.display());
    Ok(())
}

fn split_data(cfg: &RunConfig, split: Split) -> anyhow::Result<Vec<PairedSample>> {
    load_split(&cfg.data.data_dir, split)
        .with_context(|| format!("loading {} split from {}", split.as_str(), cfg.data.data_dir.display()))
}

fn warn_model_mismatch(cfg: &RunConfig, model: &Model<f32>) {
    if model.cfg != cfg.model {
        log::warn!("model settings come from the checkpoint and differ from the configuration");
    }
}

fn train_one(cfg: &RunConfig, stage: usize, resume: bool) -> anyhow::Result<()> {
    if stage > cfg.model.sub_decoders {
        bail!(usage(format!(
            "stage {stage} exceeds sub_decoders = {}",
            cfg.model.sub_decoders
        )));
    }
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let train = split_data(cfg, Split::Train)?;

    let resume_ck = if resume {
        let p = paths
            .latest_periodic(stage)
            .ok_or_else(|| usage(format!("no periodic checkpoint of stage {stage} to resume from")))?;
        log::info!("resuming from {}", p.display());
        Some(Checkpoint::load(&p)?)
    } else {
        None
    };
    let mut model = match (&resume_ck, stage) {
        (Some(ck), _) => ck.to_model()?,
        (None, 0) => build_model(&cfg.model, cfg.seed)?,
        (None, k) => {
            let prev = paths.stage_checkpoint(k - 1);
            if !prev.exists() {
                return Err(aibnet_core::Error::MissingCheckpoint(prev).into());
            }
            Checkpoint::load(&prev)?.to_model()?
        }
    };
    warn_model_mismatch(cfg, &model);
    let outcome = train_stage(&mut model, cfg, stage, &train, resume_ck.as_ref(), None)?;

    let test = split_data(cfg, Split::Test)?;
    let summary = evaluate(&model, &test, stage, outcome.iterations, Split::Test, cfg.deterministic)?;
    append_metrics(&paths.metrics_csv(), &summary.rows)?;
    println!(
        "stage {stage}: {} iterations, test PSNR {:.3} dB / SSIM {:.4} (blurred {:.3} dB / {:.4}), checkpoint {}",
        outcome.iterations,
        summary.mean_psnr,
        summary.mean_ssim,
        summary.input_psnr,
        summary.input_ssim,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn latest_stage_checkpoint(cfg: &RunConfig) -> Option<PathBuf> {
    let paths = RunPaths::new(&cfg.out_dir);
    (0..=cfg.model.sub_decoders.max(8))
        .rev()
        .map(|k| paths.stage_checkpoint(k))
        .find(|p| p.exists())
}

fn load_model(cfg: &RunConfig, args: &ModelArgs) -> anyhow::Result<(Model<f32>, usize)> {
    let path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => latest_stage_checkpoint(cfg)
            .ok_or_else(|| aibnet_core::Error::MissingCheckpoint(RunPaths::new(&cfg.out_dir).stage_checkpoint(0)))?,
    };
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let stage = args.stage.unwrap_or(ck.stage as usize);
    let model = ck.to_model()?;
    if stage > model.sub_decoders.len() {
        bail!(usage(format!(
            "stage {stage} exceeds the checkpoint's {} sub-decoders",
            model.sub_decoders.len()
        )));
    }
    Ok((model, stage))
}

fn eval(cfg: &RunConfig, args: &ModelArgs, split: &str) -> anyhow::Result<()> {
    let split: Split = split.parse()?;
    let (model, stage) = load_model(cfg, args)?;
    let data = split_data(cfg, split)?;
    let s = evaluate(&model, &data, stage, 0, split, cfg.deterministic)?;
    let paths = RunPaths::new(&cfg.out_dir);
    append_metrics(&paths.metrics_csv(), &s.rows)?;
    println!(
        "{} images ({} failed): PSNR {:.3} dB, SSIM {:.4}; blurred input PSNR {:.3} dB, SSIM {:.4}",
        s.rows.len(),
        s.failures,
        s.mean_psnr,
        s.mean_ssim,
        s.input_psnr,
        s.input_ssim
    );
    Ok(())
}

fn infer(cfg: &RunConfig, args: &ModelArgs, input: &Path, output: &Path) -> anyhow::Result<()> {
    let (model, stage) = load_model(cfg, args)?;
    let img = load_png(input).with_context(|| format!("reading {}", input.display()))?;
    let out = restore(&model, &img, stage)?;
    save_png(&out, output)?;
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, target: &str, tol: Option<f64>) -> anyhow::Result<()> {
    let targets: Vec<GradTarget> = if target == "all" {
        GradTarget::ALL.to_vec()
    } else {
        vec![target.parse()?]
    };
    if let Some(t) = tol {
        if !(t >= 0.0) {
            bail!(usage("--tol must be nonnegative"));
        }
    }
    let mut ok = true;
    for t in targets {
        let report = gradcheck(t, cfg.seed)?;
        let limit = tol.unwrap_or_else(|| t.default_tol());
        for g in &report.groups {
            println!("{t}\t{}\t{}\t{:.3e}", g.group, g.coords, g.rel_err);
        }
        let pass = report.passes(limit);
        println!(
            "{} {t}: max relative error {:.3e} (tol {limit:.1e})",
            if pass { "PASS" } else { "FAIL" },
            report.max_rel_err()
        );
        ok &= pass;
    }
    if ok {
        Ok(())
    } else {
        Err(VerificationFailed.into())
    }
}

fn sweep(cfg: &RunConfig, kind: &str) -> anyhow::Result<()> {
    let kind: SweepKind = kind.parse()?;
    let train = split_data(cfg, Split::Train)?;
    let test = split_data(cfg, Split::Test)?;
    let rows = run_sweep(kind, cfg, &train, &test)?;
    let name = match kind {
        SweepKind::Masks => "sweep_masks",
        SweepKind::Components => "sweep_components",
    };
    let table = sweep_table(kind, &rows);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(format!("{name}.csv")), sweep_csv(&rows))?;
    std::fs::write(cfg.out_dir.join(format!("{name}.md")), &table)?;
    print!("{table}");
    Ok(())
}

fn dump_attn(cfg: &RunConfig, args: &ModelArgs, input: &Path, dir: Option<&Path>) -> anyhow::Result<()> {
    let (model, stage) = load_model(cfg, args)?;
    let img = load_png(input).with_context(|| format!("reading {}", input.display()))?;
    let probes = inspect::capture(&model, &img, stage)?;
    let dir = dir.map_or_else(|| cfg.out_dir.join("attn"), Path::to_path_buf);
    for p in inspect::write_dump(&probes, &dir)? {
        println!("{}", p.display());
    }
    Ok(())
}
