mod common;

use aibnet_core::blocks_frequency::*;
use aibnet_core::blocks_spatial::*;
use aibnet_core::{ops, Ctx, ParamStore, Tensor, Var};
use common::{jitter, max_abs_diff, random_tensor, Map};
use proptest::prelude::*;

fn sfem_cfg(c: usize, alpha_init: f64) -> SfemConfig {
    SfemConfig {
        channels: c,
        alpha_init,
        split: SfemSplit::Expand,
    }
}

fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: Fn(&Ctx<f64>, &Var<f64>) -> aibnet_core::Result<Var<f64>>,
{
    let ctx = Ctx::eval(store);
    f(&ctx, &Var::constant(x.clone())).unwrap().value().clone()
}

#[test]
fn sfem_matches_dense_oracle_at_two_channels() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let p = SfemParams::new(&mut store, "m", &sfem_cfg(2, 0.8), seed).unwrap();
        jitter(&mut store, 0.5, seed);
        let x = random_tensor(&[1, 2, 1, 1], seed + 100);
        let got = run(&store, &x, |c, x| sfem_forward(c, x, &p));
        let want = common::sfem(&store, &p, &Map::from_tensor(&x), None);
        assert!(max_abs_diff(got.data(), &want.v) < 1e-6);
    }
}

#[test]
fn sfem_matches_dense_oracle_on_small_map() {
    let mut store = ParamStore::new();
    let p = SfemParams::new(&mut store, "m", &sfem_cfg(4, 0.8), 3).unwrap();
    jitter(&mut store, 0.3, 3);
    let x = random_tensor(&[1, 4, 3, 3], 4);
    let got = run(&store, &x, |c, x| sfem_forward(c, x, &p));
    let want = common::sfem(&store, &p, &Map::from_tensor(&x), None);
    assert!(max_abs_diff(got.data(), &want.v) < 1e-9);
    assert_eq!(got.shape(), x.shape());
}

#[test]
fn identical_branches_cancel_exactly() {
    let c = 3;
    let mut store = ParamStore::new();
    let p = SfemParams::new(&mut store, "m", &sfem_cfg(c, 1.0), 5).unwrap();
    jitter(&mut store, 0.2, 5);
    // copy the Q1/K1 projections onto Q2/K2; alpha scalars stay zero so alpha = 1
    for id in [p.alpha_q1, p.alpha_k1, p.alpha_q2, p.alpha_k2] {
        store.set(id, Tensor::zeros(&[1])).unwrap();
    }
    for pid in [p.proj_in.weight, p.proj_in.bias.unwrap(), p.dw.weight, p.dw.bias] {
        let mut t = store.get(pid).clone();
        let per = t.len() / (5 * c);
        let d = t.data_mut();
        for i in 0..2 * c * per {
            d[2 * c * per + i] = d[i];
        }
        store.set(pid, t).unwrap();
    }
    let x = random_tensor(&[1, c, 4, 4], 6);
    let ctx = Ctx::eval(&store).with_probes();
    let out = sfem_forward(&ctx, &Var::constant(x), &p).unwrap();
    let probes = ctx.take_probes();
    let (a1, a2) = (&probes[0].1, &probes[1].1);
    assert_eq!(a1, a2);
    assert_eq!(probes[2].1.data()[0], 1.0);
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_alpha_reduces_to_single_branch_attention() {
    let mut store = ParamStore::new();
    let p = SfemParams::new(&mut store, "m", &sfem_cfg(4, 0.0), 8).unwrap();
    jitter(&mut store, 0.3, 8);
    for id in [p.alpha_q1, p.alpha_k1, p.alpha_q2, p.alpha_k2] {
        store.set(id, Tensor::zeros(&[1])).unwrap();
    }
    let x = random_tensor(&[1, 4, 3, 5], 9);
    let got = run(&store, &x, |c, x| sfem_forward(c, x, &p));
    let want = common::sfem(&store, &p, &Map::from_tensor(&x), Some(0.0));
    assert!(max_abs_diff(got.data(), &want.v) < 1e-6);
}

#[test]
fn attention_rows_are_stochastic() {
    let mut store = ParamStore::new();
    let p = SfemParams::new(&mut store, "m", &sfem_cfg(5, 0.8), 1).unwrap();
    jitter(&mut store, 1.0, 1);
    let ctx = Ctx::eval(&store).with_probes();
    sfem_forward(&ctx, &Var::constant(random_tensor(&[2, 5, 4, 3], 2)), &p).unwrap();
    for (name, t) in ctx.take_probes() {
        if name.ends_with(".att1") || name.ends_with(".att2") {
            for row in t.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

fn block(c: usize, with_sfem: bool, seed: u64) -> (ParamStore<f64>, SfdhBlockParams) {
    let mut store = ParamStore::new();
    let cfg = SfdhConfig {
        channels: c,
        ffn_expansion: 2,
        sfem: with_sfem.then(|| sfem_cfg(c, 0.8)),
    };
    let p = SfdhBlockParams::new(&mut store, "b", &cfg, seed).unwrap();
    jitter(&mut store, 0.3, seed);
    (store, p)
}

#[test]
fn sfdh_matches_straight_line_oracle() {
    for seed in 0..3 {
        let (store, p) = block(4, true, seed);
        let x = random_tensor(&[1, 4, 3, 3], seed + 50);
        let got = run(&store, &x, |c, x| sfdh_block_forward(c, x, &p));
        let want = common::sfdh(&store, &p, &Map::from_tensor(&x));
        assert!(max_abs_diff(got.data(), &want.v) < 1e-9);
    }
}

#[test]
fn zeroed_branches_leave_pure_residual() {
    let (mut store, p) = block(4, true, 2);
    let sfem = &p.sfem.as_ref().unwrap().sfem;
    for id in [p.sca.conv.weight, p.sca.conv.bias.unwrap(), sfem.proj_out.weight, p.ffn_out.weight, p.ffn_out.bias.unwrap()] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let x = random_tensor(&[1, 4, 5, 3], 7);
    assert_eq!(run(&store, &x, |c, x| sfdh_block_forward(c, x, &p)), x);
}

#[test]
fn zero_fusion_weight_matches_baseline_block() {
    let (mut store, p) = block(4, true, 4);
    store.set(p.sfem.as_ref().unwrap().w_fuse, Tensor::zeros(&[1])).unwrap();
    let baseline = SfdhBlockParams { sfem: None, ..p.clone() };
    let x = random_tensor(&[1, 4, 4, 4], 5);
    let a = run(&store, &x, |c, x| sfdh_block_forward(c, x, &p));
    let b = run(&store, &x, |c, x| sfdh_block_forward(c, x, &baseline));
    assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
    let want = common::sfdh(&store, &baseline, &Map::from_tensor(&x));
    assert!(max_abs_diff(b.data(), &want.v) < 1e-9);
}

fn hfs_block(c: usize, n_m: usize, mode: MaskMode, seed: u64) -> (ParamStore<f64>, HfsBlockParams) {
    let mut store = ParamStore::new();
    let p = HfsBlockParams::new(&mut store, "h", c, n_m, 3, mode, seed).unwrap();
    jitter(&mut store, 0.4, seed);
    (store, p)
}

#[test]
fn hfs_matches_dense_oracle_at_two_channels() {
    for seed in 0..6 {
        let (store, p) = hfs_block(2, 1, MaskMode::Exclude, seed);
        let x = random_tensor(&[1, 2, 3, 3], seed + 10);
        let got = run(&store, &x, |c, x| hfs_block_forward(c, x, &p));
        let want = common::hfs(&store, &p, &Map::from_tensor(&x));
        assert!(max_abs_diff(got.data(), &want.v) < 1e-6);
    }
}

#[test]
fn hfs_matches_dense_oracle_with_four_masks() {
    for mode in [MaskMode::Exclude, MaskMode::ZeroFill] {
        let (store, p) = hfs_block(5, 4, mode, 3);
        let x = random_tensor(&[1, 5, 4, 3], 12);
        let got = run(&store, &x, |c, x| hfs_block_forward(c, x, &p));
        let want = common::hfs(&store, &p, &Map::from_tensor(&x));
        assert!(max_abs_diff(got.data(), &want.v) < 1e-9, "{mode}");
    }
}

#[test]
fn default_mask_count_records_four_supports() {
    let (store, p) = hfs_block(5, 4, MaskMode::Exclude, 1);
    let ctx = Ctx::eval(&store).with_probes();
    hfs_block_forward(&ctx, &Var::constant(random_tensor(&[1, 5, 3, 3], 2)), &p).unwrap();
    let probes = ctx.take_probes();
    let kept: Vec<usize> = probes
        .iter()
        .map(|(_, t)| t.data()[..5].iter().filter(|&&v| v == 1.0).count())
        .collect();
    // fractions 1/2, 2/3, 3/4, 4/5 of five columns, rounded up
    assert_eq!(kept, vec![3, 4, 4, 4]);
}

#[test]
fn zero_lambdas_and_no_masks_are_identity() {
    let (mut store, p) = hfs_block(3, 3, MaskMode::Exclude, 2);
    for &id in &p.lambdas {
        store.set(id, Tensor::zeros(&[1])).unwrap();
    }
    let x = random_tensor(&[1, 3, 4, 4], 3);
    assert_eq!(run(&store, &x, |c, x| hfs_block_forward(c, x, &p)), x);
    let (store0, p0) = hfs_block(3, 0, MaskMode::Exclude, 2);
    assert_eq!(run(&store0, &x, |c, x| hfs_block_forward(c, x, &p0)), x);
}

#[test]
fn masked_softmax_rows_live_on_the_support() {
    let scores = random_tensor(&[1, 6, 6], 21);
    for i in 1..=5 {
        let keep = top_k_rows(scores.data(), 6, kept_count(mask_fraction(i), 6));
        let m = ops::softmax_rows(&Var::constant(scores.clone()), Some(&keep));
        for (row, krow) in m.value().data().chunks(6).zip(keep.chunks(6)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (v, k) in row.iter().zip(krow) {
                if !k {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}

#[test]
fn decoupler_impulse_matches_hand_convolution() {
    let mut store = ParamStore::new();
    let p = DecouplerParams::new(&mut store, "d", 1, 3, 0).unwrap();
    let mut x = Tensor::zeros(&[1, 1, 3, 3]);
    x.data_mut()[4] = 1.0;
    let out = run(&store, &x, |c, x| decoupler_highpass(c, x, &p));
    let low = common::depthwise(&[1.0 / 9.0; 9], None, 3, &Map::from_tensor(&x), true);
    assert!((out.data()[4] - (1.0 - 1.0 / 9.0)).abs() < 1e-12);
    for i in 0..9 {
        assert!((out.data()[i] - (x.data()[i] - low.v[i])).abs() < 1e-12);
    }
}

#[test]
fn delta_filter_passes_nothing_high() {
    let mut store = ParamStore::new();
    let p = DecouplerParams::new(&mut store, "d", 2, 3, 0).unwrap();
    let mut logits = Tensor::zeros(&[2, 9]);
    logits.data_mut()[4] = 60.0;
    logits.data_mut()[13] = 60.0;
    store.set(p.logits, logits).unwrap();
    let out = run(&store, &random_tensor(&[1, 2, 5, 5], 1), |c, x| decoupler_highpass(c, x, &p));
    assert!(out.max_abs() < 1e-20);
}

proptest! {
    #[test]
    fn decoupler_filters_normalized_and_kill_constants(
        logits in prop::collection::vec(-5.0f64..5.0, 27),
        consts in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let mut store = ParamStore::new();
        let p = DecouplerParams::new(&mut store, "d", 3, 3, 0).unwrap();
        store.set(p.logits, Tensor::from_vec(&[3, 9], logits).unwrap()).unwrap();
        let ctx = Ctx::eval(&store);
        let f = decoupler_filters(&ctx, &p);
        for row in f.value().data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        let x = Tensor::from_fn(&[1, 3, 4, 5], |i| consts[i / 20]);
        let out = decoupler_highpass(&ctx, &Var::constant(x), &p).unwrap();
        prop_assert!(out.value().max_abs() < 1e-6);
    }
}
