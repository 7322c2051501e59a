//! Progressive stage-wise training, evaluation and run-directory layout.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Var;
use crate::checkpoint::{Checkpoint, Moments, OptimizerState};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{augment, sample_patches, PairedSample, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossComponents};
use crate::metrics::{psnr, ssim};
use crate::network::{restore, stage_output, stage_prefixes, Model};
use crate::params::{fnv1a, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "stage,iter,split,image_id,psnr_db,ssim";
pub const TRAIN_LOG_HEADER: &str = "stage,iter,lr,loss,charbonnier,edge,frequency,grad_norm";

/// Cosine decay from `lr_init` at `iter = 0` to `lr_final` at `iter = total`.
pub fn cosine_lr(iter: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = iter.min(total) as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Iteration budget of `stage` for a model with `sub_decoders` stages after
/// pretraining.
pub fn stage_iters(train: &TrainConfig, sub_decoders: usize, stage: usize) -> usize {
    let pre_default = (train.total_iters as f64 * train.pretrain_fraction).round() as usize;
    if stage == 0 {
        return train.pretrain_iters.unwrap_or(pre_default);
    }
    train
        .iters_per_stage
        .unwrap_or_else(|| train.total_iters.saturating_sub(pre_default) / sub_decoders.max(1))
}

/// Adam with bias correction. Moments are keyed by parameter name so they
/// survive a checkpoint round trip.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: HashMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn from_state(cfg: &TrainConfig, state: &OptimizerState) -> Self {
        let mut adam = Self::new(cfg);
        adam.step = state.step;
        adam.moments = state
            .moments
            .iter()
            .map(|m| (m.name.clone(), (m.m.clone(), m.v.clone())))
            .collect();
        adam
    }

    pub fn state(&self) -> OptimizerState {
        let mut moments: Vec<Moments> = self
            .moments
            .iter()
            .map(|(name, (m, v))| Moments {
                name: name.clone(),
                m: m.clone(),
                v: v.clone(),
            })
            .collect();
        moments.sort_by(|a, b| a.name.cmp(&b.name));
        OptimizerState {
            step: self.step,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = self.eps as f32;
        for (id, g) in grads {
            let name = store.name(*id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Generator for one training iteration; depends only on its coordinates so
/// a resumed run draws the same batches.
pub fn iteration_rng(seed: u64, stage: usize, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(format!("{seed}:{stage}:{iter}").as_bytes()))
}

/// Draws `batch` augmented patches, each from a uniformly chosen pair.
pub fn sample_batch(
    data: &[PairedSample],
    batch: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let mut blurred = Vec::with_capacity(batch);
    let mut sharp = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &data[rng.random_range(0..data.len())];
        let crop = sample_patches(pair, patch, 1, rng)?.pop().expect("one patch");
        let s = augment(&crop, rng);
        blurred.push(s.blurred);
        sharp.push(s.sharp);
    }
    Ok((Tensor::stack_batch(&blurred)?, Tensor::stack_batch(&sharp)?))
}

/// Files inside a run's output directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// Final checkpoint of a finished stage.
    pub fn stage_checkpoint(&self, stage: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("stage{stage}.ckpt"))
    }

    pub fn periodic_checkpoint(&self, stage: usize, iter: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("stage{stage}_iter{iter:07}.ckpt"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    /// Periodic checkpoints of `stage`, oldest first.
    pub fn periodic_checkpoints(&self, stage: usize) -> Vec<PathBuf> {
        let prefix = format!("stage{stage}_iter");
        let mut found: Vec<PathBuf> = std::fs::read_dir(self.checkpoint_dir())
            .map(|rd| {
                rd.filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension().is_some_and(|x| x == "ckpt")
                            && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(&prefix))
                    })
                    .collect()
            })
            .unwrap_or_default();
        found.sort();
        found
    }

    pub fn latest_periodic(&self, stage: usize) -> Option<PathBuf> {
        self.periodic_checkpoints(stage).pop()
    }
}

fn append_lines(path: &Path, header: &str, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Result of one [`train_stage`] call.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: usize,
    /// Iterations completed in this stage, including any resumed prefix.
    pub iterations: usize,
    pub budget: usize,
    /// Total loss of every iteration run by this call.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

impl StageOutcome {
    pub fn finished(&self) -> bool {
        self.iterations >= self.budget
    }
}

/// Trains the parameters owned by `stage` and freezes everything else.
///
/// `resume` continues from a checkpoint written by an earlier call for the
/// same stage. `stop_after` ends the call once that many iterations of the
/// stage are complete and leaves a periodic checkpoint behind.
pub fn train_stage(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    stage: usize,
    data: &[PairedSample],
    resume: Option<&Checkpoint>,
    stop_after: Option<usize>,
) -> Result<StageOutcome> {
    if stage > model.sub_decoders.len() {
        return Err(Error::config(
            "stage",
            format!("stage {stage} exceeds {} sub-decoders", model.sub_decoders.len()),
        ));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let t = &cfg.train;
    let budget = stage_iters(t, model.sub_decoders.len(), stage);
    let paths = RunPaths::new(&cfg.out_dir);
    let prefixes = stage_prefixes(stage);
    let prefix_refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    model.store.train_only(&prefix_refs);
    let trainable = model.store.trainable_ids();

    let (start, mut adam) = match resume {
        Some(ck) => {
            if ck.stage as usize != stage {
                return Err(Error::Checkpoint(format!(
                    "resume checkpoint belongs to stage {}, not {stage}",
                    ck.stage
                )));
            }
            let adam = match &ck.optimizer {
                Some(s) => Adam::from_state(t, s),
                None => Adam::new(t),
            };
            (ck.iteration as usize, adam)
        }
        None => (0, Adam::new(t)),
    };
    let end = stop_after.map_or(budget, |s| s.min(budget));

    let mut losses = Vec::with_capacity(end.saturating_sub(start));
    let mut log = String::new();
    for iter in start..end {
        let lr = cosine_lr(iter, budget, t.lr_init, t.lr_final);
        let mut rng = iteration_rng(cfg.seed, stage, iter);
        let (blurred, sharp) = sample_batch(data, t.batch, t.patch, &mut rng)?;
        let (parts, mut grads) = {
            let ctx = Ctx::train(&model.store);
            let out = stage_output(&ctx, model, &Var::constant(blurred), stage)?;
            let (loss, parts): (Var<f32>, LossComponents) = total_loss(&out, &Var::constant(sharp), &cfg.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { stage, iter });
            }
            let mut g = loss.backward();
            let grads: Vec<(ParamId, Tensor<f32>)> = trainable
                .iter()
                .filter_map(|&id| g.take_param(id).map(|t| (id, t)))
                .collect();
            (parts, grads)
        };
        let norm = clip_global_norm(&mut grads, t.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { stage, iter });
        }
        adam.step(&mut model.store, &grads, lr);
        losses.push(parts.total);

        let done = iter + 1;
        if t.log_every > 0 && (iter % t.log_every == 0 || done == budget) {
            let _ = writeln!(
                log,
                "{stage},{iter},{lr},{},{},{},{},{norm}",
                parts.total, parts.charbonnier, parts.edge, parts.frequency
            );
            log::info!("stage {stage} iter {iter}/{budget} loss {:.5} lr {lr:.3e}", parts.total);
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < budget {
            append_lines(&paths.train_log(), TRAIN_LOG_HEADER, &std::mem::take(&mut log))?;
            save_periodic(model, &paths, stage, done, &adam, t.keep_checkpoints)?;
        }
    }
    append_lines(&paths.train_log(), TRAIN_LOG_HEADER, &log)?;

    let checkpoint = if end >= budget {
        let path = paths.stage_checkpoint(stage);
        Checkpoint::from_model(model, stage, budget as u64, Some(adam.state())).save(&path)?;
        path
    } else {
        let path = paths.periodic_checkpoint(stage, end);
        if !path.exists() {
            save_periodic(model, &paths, stage, end, &adam, t.keep_checkpoints)?;
        }
        path
    };
    Ok(StageOutcome {
        stage,
        iterations: end.max(start),
        budget,
        losses,
        checkpoint,
    })
}

fn save_periodic(
    model: &Model<f32>,
    paths: &RunPaths,
    stage: usize,
    iter: usize,
    adam: &Adam,
    keep: usize,
) -> Result<()> {
    Checkpoint::from_model(model, stage, iter as u64, Some(adam.state())).save(&paths.periodic_checkpoint(stage, iter))?;
    let all = paths.periodic_checkpoints(stage);
    for old in &all[..all.len().saturating_sub(keep.max(1))] {
        std::fs::remove_file(old)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    pub iter: usize,
    pub split: Split,
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Metrics of the unrestored inputs over the same images.
    pub input_psnr: f64,
    pub input_ssim: f64,
    /// Images that could not be evaluated.
    pub failures: usize,
}

/// PSNR/SSIM of the stage-`stage` restoration of every pair. Per-image
/// failures are logged and skipped.
pub fn evaluate(
    model: &Model<f32>,
    data: &[PairedSample],
    stage: usize,
    iter: usize,
    split: Split,
    deterministic: bool,
) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("no {} pairs to evaluate", split.as_str())));
    }
    let one = |pair: &PairedSample| -> Result<(f64, f64, f64, f64)> {
        let out = restore(model, &pair.blurred, stage)?;
        Ok((
            psnr(&out, &pair.sharp, 1.0)?,
            ssim(&out, &pair.sharp)?,
            psnr(&pair.blurred, &pair.sharp, 1.0)?,
            ssim(&pair.blurred, &pair.sharp)?,
        ))
    };
    // Images are independent and collected in input order, so parallel
    // evaluation produces the same rows.
    let results: Vec<Result<(f64, f64, f64, f64)>> = if deterministic {
        data.iter().map(one).collect()
    } else {
        data.par_iter().map(one).collect()
    };
    let mut rows = Vec::with_capacity(data.len());
    let (mut ip, mut is) = (0.0, 0.0);
    let mut failures = 0;
    for (pair, r) in data.iter().zip(results) {
        match r {
            Ok((p, s, bp, bs)) => {
                rows.push(MetricRow {
                    stage,
                    iter,
                    split,
                    image_id: pair.id.clone(),
                    psnr_db: p,
                    ssim: s,
                });
                ip += bp;
                is += bs;
            }
            Err(e) => {
                log::warn!("evaluation of {} failed: {e}", pair.id);
                failures += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("every {} pair failed to evaluate", split.as_str())));
    }
    let n = rows.len() as f64;
    Ok(EvalSummary {
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        input_psnr: ip / n,
        input_ssim: is / n,
        rows,
        failures,
    })
}

pub fn metrics_csv_rows(rows: &[MetricRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6}",
            r.stage,
            r.iter,
            r.split.as_str(),
            r.image_id,
            r.psnr_db,
            r.ssim
        );
    }
    s
}

pub fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    append_lines(path, METRICS_HEADER, &metrics_csv_rows(rows))
}

/// Per-stage held-out summary produced by [`train_all`].
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub test: EvalSummary,
}

/// Trains stages `from..=s` in order, evaluating the test split after each
/// one and appending to the metrics CSV.
pub fn train_stages(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    from: usize,
    train: &[PairedSample],
    test: &[PairedSample],
) -> Result<Vec<StageReport>> {
    let paths = RunPaths::new(&cfg.out_dir);
    let mut reports = Vec::new();
    for stage in from..=model.sub_decoders.len() {
        let outcome = train_stage(model, cfg, stage, train, None, None)?;
        let test_eval = evaluate(model, test, stage, outcome.iterations, Split::Test, cfg.deterministic)?;
        append_metrics(&paths.metrics_csv(), &test_eval.rows)?;
        log::info!(
            "stage {stage}: test PSNR {:.3} dB (input {:.3} dB)",
            test_eval.mean_psnr,
            test_eval.input_psnr
        );
        reports.push(StageReport {
            stage,
            iterations: outcome.iterations,
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
            test: test_eval,
        });
    }
    Ok(reports)
}

/// Builds a fresh model and runs pretraining plus every sub-decoder stage.
pub fn train_all(cfg: &RunConfig, train: &[PairedSample], test: &[PairedSample]) -> Result<(Model<f32>, Vec<StageReport>)> {
    cfg.validate()?;
    let mut model = crate::network::build_model::<f32>(&cfg.model, cfg.seed)?;
    let reports = train_stages(&mut model, cfg, 0, train, test)?;
    Ok((model, reports))
}

/// Copies every parameter whose name starts with one of `prefixes` from
/// `src` into `dst`.
pub fn copy_params(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, prefixes: &[&str]) -> Result<()> {
    for e in src.entries() {
        if prefixes.iter().any(|p| e.name.starts_with(p)) {
            let id = dst
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` missing from target model", e.name)))?;
            dst.set(id, e.value.clone())?;
        }
    }
    Ok(())
}
