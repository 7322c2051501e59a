use crate::autograd::Var;
use crate::tensor::{dot_slice, sum_slice, Scalar, Tensor};

/// Layer normalization over the channel axis at every spatial location.
///
/// A location whose variance (plus `eps`) is zero normalizes to zero, so the
/// output there is `shift`.
pub fn layer_norm_channels<T: Scalar>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>, eps: f64) -> Var<T> {
    let (b, c, h, w) = x.value().dims4();
    assert_eq!(scale.shape(), &[c], "layer norm scale length");
    assert_eq!(shift.shape(), &[c], "layer norm shift length");
    let hw = h * w;
    let eps = T::c(eps);
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let xd = x.value().data();
    let sd = scale.value().data();
    let bd = shift.value().data();

    let mut xhat = Tensor::zeros(&[b, c, h, w]);
    let mut rstd = vec![T::zero(); b * hw];
    let mut mean = vec![T::zero(); hw];
    let mut var = vec![T::zero(); hw];
    for bi in 0..b {
        let xb = &xd[bi * c * hw..(bi + 1) * c * hw];
        mean.fill(T::zero());
        var.fill(T::zero());
        // shifted by the first channel so constant vectors centre to exact zeros
        let first = &xb[..hw];
        for ch in 1..c {
            for ((m, &v), &f) in mean.iter_mut().zip(&xb[ch * hw..(ch + 1) * hw]).zip(first) {
                *m += v - f;
            }
        }
        for (m, &f) in mean.iter_mut().zip(first) {
            *m = f + *m * inv_c;
        }
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xb[ch * hw..(ch + 1) * hw]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let rb = &mut rstd[bi * hw..(bi + 1) * hw];
        for (r, &s) in rb.iter_mut().zip(&var) {
            let denom = s * inv_c + eps;
            *r = if denom > T::zero() { T::one() / denom.sqrt() } else { T::zero() };
        }
        let xh = &mut xhat.data_mut()[bi * c * hw..(bi + 1) * c * hw];
        for ch in 0..c {
            let src = &xb[ch * hw..(ch + 1) * hw];
            let dst = &mut xh[ch * hw..(ch + 1) * hw];
            for p in 0..hw {
                dst[p] = (src[p] - mean[p]) * rb[p];
            }
        }
    }
    let mut out = xhat.clone();
    for bi in 0..b {
        for ch in 0..c {
            let (g, s) = (sd[ch], bd[ch]);
            for v in &mut out.data_mut()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                *v = *v * g + s;
            }
        }
    }

    Var::from_op(
        out,
        &[x, scale, shift],
        Box::new(move |args| {
            let gd = args.grad.data();
            let sd = args.inputs[1].data();
            let xh = xhat.data();
            let gx = args.needs[0].then(|| {
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let mut m1 = vec![T::zero(); hw];
                let mut m2 = vec![T::zero(); hw];
                for bi in 0..b {
                    let base = bi * c * hw;
                    m1.fill(T::zero());
                    m2.fill(T::zero());
                    for ch in 0..c {
                        let g = &gd[base + ch * hw..base + (ch + 1) * hw];
                        let xr = &xh[base + ch * hw..base + (ch + 1) * hw];
                        for p in 0..hw {
                            let dxh = g[p] * sd[ch];
                            m1[p] += dxh;
                            m2[p] += dxh * xr[p];
                        }
                    }
                    let rb = &rstd[bi * hw..(bi + 1) * hw];
                    let gm = gx.data_mut();
                    for ch in 0..c {
                        for p in 0..hw {
                            let i = base + ch * hw + p;
                            let dxh = gd[i] * sd[ch];
                            gm[i] = rb[p] * (dxh - m1[p] * inv_c - xh[i] * m2[p] * inv_c);
                        }
                    }
                }
                gx
            });
            let per_channel = |f: &dyn Fn(usize) -> T| Tensor::from_fn(&[c], f);
            let gs = args.needs[1].then(|| {
                per_channel(&|ch| {
                    (0..b)
                        .map(|bi| {
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            dot_slice(&gd[r.clone()], &xh[r])
                        })
                        .sum()
                })
            });
            let gb = args.needs[2].then(|| {
                per_channel(&|ch| {
                    (0..b)
                        .map(|bi| sum_slice(&gd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]))
                        .sum()
                })
            });
            vec![gx, gs, gb]
        }),
    )
}

/// Channel-halving gate: output channel `k` is `x[k] * x[k + K]`.
pub fn simple_gate<T: Scalar>(x: &Var<T>) -> Var<T> {
    let (b, c2, h, w) = x.value().dims4();
    assert_eq!(c2 % 2, 0, "simple gate needs an even channel count");
    let c = c2 / 2;
    let half = c * h * w;
    let xd = x.value().data();
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        let src = &xd[bi * 2 * half..(bi + 1) * 2 * half];
        let dst = &mut out.data_mut()[bi * half..(bi + 1) * half];
        for i in 0..half {
            dst[i] = src[i] * src[half + i];
        }
    }
    Var::from_op(
        out,
        &[x],
        Box::new(move |args| {
            let xd = args.inputs[0].data();
            let gd = args.grad.data();
            let mut gx = Tensor::zeros(&[b, c2, h, w]);
            for bi in 0..b {
                let src = &xd[bi * 2 * half..(bi + 1) * 2 * half];
                let g = &gd[bi * half..(bi + 1) * half];
                let dst = &mut gx.data_mut()[bi * 2 * half..(bi + 1) * 2 * half];
                for i in 0..half {
                    dst[i] = g[i] * src[half + i];
                    dst[half + i] = g[i] * src[i];
                }
            }
            vec![Some(gx)]
        }),
    )
}
