//! High-frequency path: learnable low-pass decoupling, top-fraction score
//! masks and the masked multi-attention fusion block.

use crate::autograd::Var;
use crate::blocks_spatial::{Depthwise, Pointwise, TEMPERATURE_EPS};
use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// How masked-out scores are treated before the row softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Masked entries are removed from the softmax support (weight exactly 0).
    Exclude,
    /// Masked entries are overwritten with 0 and still take part in the softmax.
    ZeroFill,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(Self::Exclude),
            "zero-fill" => Ok(Self::ZeroFill),
            _ => Err(Error::config("mask_mode", format!("expected exclude|zero-fill, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exclude => "exclude",
            Self::ZeroFill => "zero-fill",
        })
    }
}

/// Per-channel `k x k` filter logits; the effective filter is their softmax.
#[derive(Clone, Debug)]
pub struct DecouplerParams {
    pub logits: ParamId,
    pub kernel: usize,
}

impl DecouplerParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, kernel: usize, seed: u64) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::config("decoupler_kernel", format!("filter size must be odd, got {kernel}")));
        }
        Ok(Self {
            logits: store.init(&format!("{name}.logits"), &[c, kernel * kernel], Init::Zeros, seed)?,
            kernel,
        })
    }
}

/// Softmax-normalized filters as a `(C, 1, k, k)` depthwise kernel.
pub fn decoupler_filters<T: Scalar>(ctx: &Ctx<T>, p: &DecouplerParams) -> Var<T> {
    let logits = ctx.p(p.logits);
    let c = logits.shape()[0];
    ops::reshape(&ops::softmax_rows(&logits, None), &[c, 1, p.kernel, p.kernel])
}

/// `x - lowpass(x)` with reflect padding.
pub fn decoupler_highpass<T: Scalar>(ctx: &Ctx<T>, x: &Var<T>, p: &DecouplerParams) -> Result<Var<T>> {
    if p.kernel.is_multiple_of(2) {
        return Err(Error::config("decoupler_kernel", "filter size must be odd"));
    }
    let c = x.shape()[1];
    if ctx.store().get(p.logits).shape()[0] != c {
        return Err(Error::config("decoupler", format!("filters do not match {c} channels")));
    }
    let low = ops::depthwise_conv2d(x, &decoupler_filters(ctx, p), None, Padding::Reflect);
    Ok(ops::sub(x, &low))
}

/// Number of entries kept per row of length `cols` for a keep fraction.
///
/// Products that land within 1e-9 of an integer are treated as exact, so
/// `2/3 * 3` keeps two entries rather than three.
pub fn kept_count(fraction: f64, cols: usize) -> usize {
    let x = fraction * cols as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k.max(1.0) as usize).min(cols)
}

/// Keep flags for the `keep` largest entries of each row; ties go to the
/// lower column index.
pub fn top_k_rows<T: Scalar>(scores: &[T], cols: usize, keep: usize) -> Vec<bool> {
    let mut flags = vec![false; scores.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for (r, row) in scores.chunks_exact(cols).enumerate() {
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &c in &order[..keep.min(cols)] {
            flags[r * cols + c] = true;
        }
    }
    flags
}

/// Keeps the top `ceil(fraction * C)` entries of each row of a score matrix
/// (last axis) and sets the rest to negative infinity.
pub fn mask_top_fraction<T: Scalar>(scores: &Tensor<T>, fraction: f64) -> Result<Tensor<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", format!("must lie in (0, 1], got {fraction}")));
    }
    let cols = *scores.shape().last().unwrap_or(&0);
    if cols == 0 {
        return Ok(scores.clone());
    }
    let keep = top_k_rows(scores.data(), cols, kept_count(fraction, cols));
    let mut out = scores.clone();
    for (v, k) in out.data_mut().iter_mut().zip(keep) {
        if !k {
            *v = T::neg_infinity();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct HfsBlockParams {
    pub name: String,
    pub channels: usize,
    pub proj_in: Pointwise,
    pub dw: Depthwise,
    pub beta: ParamId,
    /// One fusion weight per mask; the length is the mask count.
    pub lambdas: Vec<ParamId>,
    pub decoupler: DecouplerParams,
    pub mask_mode: MaskMode,
}

impl HfsBlockParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        n_masks: usize,
        kernel: usize,
        mask_mode: MaskMode,
        seed: u64,
    ) -> Result<Self> {
        let lambda0 = if n_masks > 0 { 1.0 / n_masks as f64 } else { 0.0 };
        let lambdas = (0..n_masks)
            .map(|i| store.init(&format!("{name}.lambda{}", i + 1), &[1], Init::Const(lambda0), seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            channels: c,
            proj_in: Pointwise::new(store, &format!("{name}.proj_in"), c, 3 * c, true, seed)?,
            dw: Depthwise::new(store, &format!("{name}.dw"), 3 * c, seed)?,
            beta: store.init(&format!("{name}.beta"), &[1], Init::Const((c as f64).sqrt()), seed)?,
            lambdas,
            decoupler: DecouplerParams::new(store, &format!("{name}.decoupler"), c, kernel, seed)?,
            mask_mode,
        })
    }

    pub fn n_masks(&self) -> usize {
        self.lambdas.len()
    }
}

/// Fraction of each score row kept by the `i`-th mask (`i >= 1`).
pub fn mask_fraction(i: usize) -> f64 {
    i as f64 / (i + 1) as f64
}

/// `x_n + sum_i lambda_i * softmax(mask_i(Q K^T / beta)) V` on the
/// high-frequency part of `x_n`. With no masks the block is the identity.
pub fn hfs_block_forward<T: Scalar>(ctx: &Ctx<T>, x_n: &Var<T>, p: &HfsBlockParams) -> Result<Var<T>> {
    let c = x_n.shape()[1];
    if c != p.channels {
        return Err(Error::config(
            "hfs",
            format!("input has {c} channels, parameters expect {}", p.channels),
        ));
    }
    if p.n_masks() == 0 {
        return Ok(x_n.clone());
    }
    let high = decoupler_highpass(ctx, x_n, &p.decoupler)?;
    let qkv = p.dw.forward(ctx, &p.proj_in.forward(ctx, &high));
    let parts = ops::split_channels(&qkv, 3);
    let scores = ops::div_abs(&ops::channel_gram(&parts[0], &parts[1]), &ctx.p(p.beta), TEMPERATURE_EPS);

    let mut fused: Option<Var<T>> = None;
    for (i, &lambda) in p.lambdas.iter().enumerate() {
        // ceil(i * C / (i + 1)) in integer arithmetic
        let keep_count = ((i + 1) * c).div_ceil(i + 2);
        let keep = ctx.support(|| top_k_rows(scores.value().data(), c, keep_count));
        if ctx.probing() {
            let support = Tensor::from_fn(scores.shape(), |j| if keep[j] { T::one() } else { T::zero() });
            ctx.record(format!("{}.mask{}", p.name, i + 1), &support);
        }
        let m = match p.mask_mode {
            MaskMode::Exclude => ops::softmax_rows(&scores, Some(&keep)),
            MaskMode::ZeroFill => ops::softmax_rows(&ops::fill_masked(&scores, &keep, T::zero()), None),
        };
        let weighted = ops::mul_scalar(&m, &ctx.p(lambda));
        fused = Some(match fused {
            None => weighted,
            Some(acc) => ops::add(&acc, &weighted),
        });
    }
    let fused = fused.expect("at least one mask");
    Ok(ops::add(x_n, &ops::attend(&fused, &parts[2])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn keep_all_leaves_scores_unchanged() {
        let s = row(&[0.3, -1.0, 2.0]);
        assert_eq!(mask_top_fraction(&s, 1.0).unwrap(), s);
    }

    #[test]
    fn two_thirds_of_three() {
        let out = mask_top_fraction(&row(&[0.9, 0.5, 0.1]), 2.0 / 3.0).unwrap();
        assert_eq!(out.data(), &[0.9, 0.5, f64::NEG_INFINITY]);
    }

    #[test]
    fn ties_keep_lowest_columns() {
        let out = mask_top_fraction(&row(&[0.4, 0.4, 0.4]), 0.5).unwrap();
        assert_eq!(out.data(), &[0.4, 0.4, f64::NEG_INFINITY]);
    }

    #[test]
    fn kept_count_uses_ceiling() {
        assert_eq!(kept_count(0.5, 3), 2);
        assert_eq!(kept_count(2.0 / 3.0, 3), 2);
        assert_eq!(kept_count(0.75, 4), 3);
        assert_eq!(kept_count(0.8, 5), 4);
        assert_eq!(kept_count(0.01, 5), 1);
        for i in 1..=5usize {
            for c in 1..=64usize {
                assert_eq!(kept_count(mask_fraction(i), c), (i * c).div_ceil(i + 1));
            }
        }
    }

    #[test]
    fn invalid_fraction_rejected() {
        assert!(mask_top_fraction(&row(&[1.0]), 0.0).is_err());
        assert!(mask_top_fraction(&row(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn even_decoupler_kernel_rejected() {
        let mut store = ParamStore::<f64>::new();
        assert!(DecouplerParams::new(&mut store, "d", 2, 4, 0).is_err());
    }

    fn finite_count(t: &Tensor<f64>, r: usize, cols: usize) -> usize {
        t.data()[r * cols..(r + 1) * cols].iter().filter(|v| v.is_finite()).count()
    }

    proptest! {
        #[test]
        fn mask_cardinality_and_monotonicity(
            cols in 1usize..9,
            vals in proptest::collection::vec(-3i32..4, 64),
            f1 in 0.01f64..1.0,
            f2 in 0.01f64..1.0,
            scale in 0.01f64..50.0,
        ) {
            let rows = 3;
            let data: Vec<f64> = vals.iter().take(rows * cols).map(|&v| v as f64 * 0.5).collect();
            prop_assume!(data.len() == rows * cols);
            let scores = Tensor::from_vec(&[rows, cols], data).unwrap();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = mask_top_fraction(&scores, lo).unwrap();
            let b = mask_top_fraction(&scores, hi).unwrap();
            for r in 0..rows {
                prop_assert_eq!(finite_count(&a, r, cols), kept_count(lo, cols));
                prop_assert_eq!(finite_count(&b, r, cols), kept_count(hi, cols));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                if x.is_finite() {
                    prop_assert!(y.is_finite(), "kept set must grow with the fraction");
                }
            }
            // positive rescaling keeps the same support
            let scaled = mask_top_fraction(&scores.scale(scale), lo).unwrap();
            for (x, y) in a.data().iter().zip(scaled.data()) {
                prop_assert_eq!(x.is_finite(), y.is_finite());
            }
        }
    }
}
