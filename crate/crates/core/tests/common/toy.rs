//! Small in-memory datasets and configurations for training tests.

use std::path::Path;

use aibnet_core::config::RunConfig;
use aibnet_core::data::{apply_blur, gen_motion_kernel, quantize, synth_sharp, PairedSample};
use aibnet_core::network::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` synthetic blurred/sharp pairs of size `size`.
pub fn pairs(n: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sharp = quantize(&synth_sharp(size, &mut rng));
            let length = rng.random_range(5..=11);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let k = gen_motion_kernel(length, angle, 0.05, 15, seed + i as u64).unwrap();
            let blurred = quantize(&apply_blur(&sharp, &k, 0.0, &mut rng).unwrap());
            PairedSample {
                blurred,
                sharp,
                id: format!("{i:04}"),
            }
        })
        .collect()
}

pub fn model(c: usize, s: usize) -> ModelConfig {
    ModelConfig {
        base_channels: c,
        blocks_per_level: 1,
        sub_decoders: s,
        n_masks: 2,
        ..ModelConfig::default()
    }
}

/// Four-channel, two-stage configuration with explicit per-stage budgets.
pub fn config(out: &Path, pre: usize, per_stage: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: model(4, 2),
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.train.batch = 2;
    cfg.train.patch = 16;
    cfg.train.lr_init = 1e-3;
    cfg.train.pretrain_iters = Some(pre);
    cfg.train.iters_per_stage = Some(per_stage);
    cfg.train.log_every = 1;
    cfg.train.checkpoint_every = 0;
    cfg
}
