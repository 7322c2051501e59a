mod common;

use aibnet_core::checkpoint::Checkpoint;
use aibnet_core::data::Split;
use aibnet_core::network::{build_model, Model, ENCODER_PREFIX};
use aibnet_core::train::*;
use aibnet_core::Error;
use common::toy;

fn params_with(model: &Model<f32>, prefix: &str) -> Vec<(String, Vec<u32>)> {
    model
        .store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix))
        .map(|e| (e.name.clone(), e.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn logged_learning_rate_follows_cosine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::config(dir.path(), 12, 0);
    let mut model = build_model(&cfg.model, cfg.seed).unwrap();
    train_stage(&mut model, &cfg, 0, &toy::pairs(3, 24, 0), None, None).unwrap();
    let log = std::fs::read_to_string(RunPaths::new(dir.path()).train_log()).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(TRAIN_LOG_HEADER));
    let mut n = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let iter: usize = f[1].parse().unwrap();
        let lr: f64 = f[2].parse().unwrap();
        assert_eq!(lr, cosine_lr(iter, 12, cfg.train.lr_init, cfg.train.lr_final));
        n += 1;
    }
    assert_eq!(n, 12);
}

#[test]
fn loss_moving_average_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy::config(dir.path(), 2000, 0);
    cfg.model = toy::model(4, 1);
    cfg.train.log_every = 0;
    let mut model = build_model(&cfg.model, cfg.seed).unwrap();
    let out = train_stage(&mut model, &cfg, 0, &toy::pairs(2, 16, 1), None, None).unwrap();
    let ma = |end: usize| out.losses[end - 100..end].iter().sum::<f64>() / 100.0;
    assert!(ma(2000) < ma(100), "{} vs {}", ma(2000), ma(100));
}

#[test]
fn later_stages_leave_earlier_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::config(dir.path(), 4, 4);
    let data = toy::pairs(3, 24, 2);
    let mut model = build_model(&cfg.model, cfg.seed).unwrap();
    train_stage(&mut model, &cfg, 0, &data, None, None).unwrap();
    train_stage(&mut model, &cfg, 1, &data, None, None).unwrap();
    let enc = params_with(&model, ENCODER_PREFIX);
    let dec1 = params_with(&model, "sd1.");
    let dec2 = params_with(&model, "sd2.");
    train_stage(&mut model, &cfg, 2, &data, None, None).unwrap();
    assert_eq!(params_with(&model, ENCODER_PREFIX), enc);
    assert_eq!(params_with(&model, "sd1."), dec1);
    assert_ne!(params_with(&model, "sd2."), dec2);
}

#[test]
fn a_stage_only_updates_its_own_sub_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::config(dir.path(), 3, 3);
    let data = toy::pairs(2, 16, 4);
    let mut model = build_model(&cfg.model, cfg.seed).unwrap();
    train_stage(&mut model, &cfg, 0, &data, None, None).unwrap();
    let before = params_with(&model, "");
    train_stage(&mut model, &cfg, 1, &data, None, None).unwrap();
    let changed: Vec<String> = params_with(&model, "")
        .into_iter()
        .zip(before)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0)
        .collect();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("sd1.")), "{changed:?}");
}

#[test]
fn interrupted_stage_resumes_bit_exactly() {
    let data = toy::pairs(3, 24, 3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = toy::config(a.path(), 0, 10);
    let mut straight = build_model(&cfg_a.model, 0).unwrap();
    let full = train_stage(&mut straight, &cfg_a, 1, &data, None, None).unwrap();

    let cfg_b = toy::config(b.path(), 0, 10);
    let mut first = build_model(&cfg_b.model, 0).unwrap();
    let half = train_stage(&mut first, &cfg_b, 1, &data, None, Some(4)).unwrap();
    assert!(!half.finished());
    let ck = Checkpoint::load(&half.checkpoint).unwrap();
    let mut resumed = ck.to_model().unwrap();
    let rest = train_stage(&mut resumed, &cfg_b, 1, &data, Some(&ck), None).unwrap();
    assert!(rest.finished());

    assert_eq!(params_with(&straight, ""), params_with(&resumed, ""));
    let joined: Vec<f64> = half.losses.iter().chain(&rest.losses).copied().collect();
    assert_eq!(joined, full.losses);
    assert_eq!(
        std::fs::read(&full.checkpoint).unwrap(),
        std::fs::read(&rest.checkpoint).unwrap()
    );
}

#[test]
fn untrained_model_scores_like_its_input() {
    let model = build_model(&toy::model(4, 2), 0).unwrap();
    let data = toy::pairs(3, 20, 4);
    for stage in 0..=2 {
        let s = evaluate(&model, &data, stage, 0, Split::Test, true).unwrap();
        assert_eq!(s.mean_psnr, s.input_psnr);
        assert_eq!(s.mean_ssim, s.input_ssim);
        assert_eq!(s.rows.len(), 3);
    }
}

#[test]
fn empty_datasets_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy::config(dir.path(), 2, 2);
    let mut model = build_model(&cfg.model, 0).unwrap();
    assert!(matches!(evaluate(&model, &[], 1, 0, Split::Test, true), Err(Error::EmptyDataset(_))));
    assert!(matches!(train_stage(&mut model, &cfg, 0, &[], None, None), Err(Error::EmptyDataset(_))));
}

#[test]
fn metrics_csv_is_reproducible() {
    let data = toy::pairs(3, 24, 5);
    let test = toy::pairs(2, 24, 6);
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy::config(dir.path(), 3, 3);
        cfg.deterministic = false;
        train_all(&cfg, &data, &test).unwrap();
        csvs.push(std::fs::read_to_string(RunPaths::new(dir.path()).metrics_csv()).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let mut lines = csvs[0].lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 3 * 2);
}

#[test]
fn periodic_checkpoints_are_pruned() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy::config(dir.path(), 7, 0);
    cfg.train.checkpoint_every = 2;
    cfg.train.keep_checkpoints = 2;
    let mut model = build_model(&cfg.model, 0).unwrap();
    train_stage(&mut model, &cfg, 0, &toy::pairs(2, 16, 7), None, None).unwrap();
    let paths = RunPaths::new(dir.path());
    let left = paths.periodic_checkpoints(0);
    assert_eq!(left, vec![paths.periodic_checkpoint(0, 4), paths.periodic_checkpoint(0, 6)]);
    assert!(paths.stage_checkpoint(0).exists());
}
