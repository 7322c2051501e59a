//! Differentiable operations. Shape mismatches inside these kernels are
//! programming errors and panic; user-facing validation happens in the
//! block and network layers.

mod attention;
pub(crate) mod conv;
mod loss;
mod norm;

pub use attention::{alpha_value, attend, channel_gram, fill_masked, softmax_rows, ALPHA_EXP_CLAMP};
pub use conv::{conv2d, depthwise_conv2d, Padding};
pub use loss::{charbonnier_global, charbonnier_mean, fft_l1_mean, laplacian};
pub use norm::{layer_norm_channels, simple_gate};

use crate::autograd::Var;
use crate::tensor::{dot_slice, sum_slice, Scalar, Tensor};

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let value = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(
        value,
        &[a, b],
        Box::new(|args| {
            vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| args.grad.clone()),
            ]
        }),
    )
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let value = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(
        value,
        &[a, b],
        Box::new(|args| {
            vec![
                args.needs[0].then(|| args.grad.clone()),
                args.needs[1].then(|| args.grad.map(|g| -g)),
            ]
        }),
    )
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let value = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(
        value,
        &[a, b],
        Box::new(|args| {
            let [x, y] = [args.inputs[0], args.inputs[1]];
            vec![
                args.needs[0].then(|| args.grad.zip_map(y, |g, v| g * v)),
                args.needs[1].then(|| args.grad.zip_map(x, |g, v| g * v)),
            ]
        }),
    )
}

/// Multiplies by a compile-time constant.
pub fn scale<T: Scalar>(a: &Var<T>, c: f64) -> Var<T> {
    let c = T::c(c);
    Var::from_op(
        a.value().scale(c),
        &[a],
        Box::new(move |args| vec![Some(args.grad.scale(c))]),
    )
}

/// `x * s` for a single-element variable `s`.
pub fn mul_scalar<T: Scalar>(x: &Var<T>, s: &Var<T>) -> Var<T> {
    assert_eq!(s.value().len(), 1, "mul_scalar expects a scalar factor");
    let sv = s.value().data()[0];
    Var::from_op(
        x.value().scale(sv),
        &[x, s],
        Box::new(move |args| {
            let gx = args.needs[0].then(|| args.grad.scale(sv));
            let gs = args.needs[1].then(|| {
                let dot = dot_slice(args.grad.data(), args.inputs[0].data());
                Tensor::scalar(dot).reshaped(args.inputs[1].shape())
            });
            vec![gx, gs]
        }),
    )
}

/// `x / (|beta| + eps)`: a temperature that stays positive whatever the
/// sign of the stored scalar.
pub fn div_abs<T: Scalar>(x: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
    assert_eq!(beta.value().len(), 1);
    let b = beta.value().data()[0];
    let denom = b.abs() + T::c(eps);
    let inv = T::one() / denom;
    Var::from_op(
        x.value().scale(inv),
        &[x, beta],
        Box::new(move |args| {
            let gx = args.needs[0].then(|| args.grad.scale(inv));
            let gb = args.needs[1].then(|| {
                let dot = dot_slice(args.grad.data(), args.inputs[0].data());
                let sign = if b > T::zero() {
                    T::one()
                } else if b < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                Tensor::scalar(-dot * inv * inv * sign).reshaped(args.inputs[1].shape())
            });
            vec![gx, gb]
        }),
    )
}

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    let original = x.shape().to_vec();
    Var::from_op(
        x.value().clone().reshaped(shape),
        &[x],
        Box::new(move |args| vec![Some(args.grad.clone().reshaped(&original))]),
    )
}

pub fn sum_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    Var::from_op(
        Tensor::scalar(x.value().sum()),
        &[x],
        Box::new(|args| {
            let g = args.grad.data()[0];
            vec![Some(Tensor::full(args.inputs[0].shape(), g))]
        }),
    )
}

pub fn mean_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = x.value().len() as f64;
    scale(&sum_all(x), 1.0 / n)
}

/// Channels `start..start + len` of a 4-D variable.
pub fn narrow_channels<T: Scalar>(x: &Var<T>, start: usize, len: usize) -> Var<T> {
    let value = x.value().narrow_channels(start, len);
    Var::from_op(
        value,
        &[x],
        Box::new(move |args| {
            let (b, c, h, w) = args.inputs[0].dims4();
            let hw = h * w;
            let mut g = Tensor::zeros(&[b, c, h, w]);
            let gd = args.grad.data();
            for bi in 0..b {
                let dst = (bi * c + start) * hw;
                let src = bi * len * hw;
                g.data_mut()[dst..dst + len * hw].copy_from_slice(&gd[src..src + len * hw]);
            }
            vec![Some(g)]
        }),
    )
}

/// Splits a 4-D variable into `parts` equal channel groups.
pub fn split_channels<T: Scalar>(x: &Var<T>, parts: usize) -> Vec<Var<T>> {
    let (_, c, _, _) = x.value().dims4();
    assert_eq!(c % parts, 0, "cannot split {c} channels into {parts} parts");
    let len = c / parts;
    (0..parts).map(|i| narrow_channels(x, i * len, len)).collect()
}

pub fn concat_channels<T: Scalar>(xs: &[&Var<T>]) -> Var<T> {
    assert!(!xs.is_empty());
    let (b, _, h, w) = xs[0].value().dims4();
    let hw = h * w;
    let widths: Vec<usize> = xs.iter().map(|x| x.value().dims4().1).collect();
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[b, total, h, w]);
    {
        let od = out.data_mut();
        for bi in 0..b {
            let mut offset = 0;
            for (x, &cw) in xs.iter().zip(&widths) {
                let (xb, _, xh, xw) = x.value().dims4();
                assert_eq!((xb, xh, xw), (b, h, w), "concat shape mismatch");
                let src = &x.value().data()[bi * cw * hw..(bi + 1) * cw * hw];
                let dst = (bi * total + offset) * hw;
                od[dst..dst + cw * hw].copy_from_slice(src);
                offset += cw;
            }
        }
    }
    Var::from_op(
        out,
        xs,
        Box::new(move |args| {
            let gd = args.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &cw) in widths.iter().enumerate() {
                if args.needs[i] {
                    let mut g = Tensor::zeros(&[b, cw, h, w]);
                    for bi in 0..b {
                        let src = (bi * total + offset) * hw;
                        g.data_mut()[bi * cw * hw..(bi + 1) * cw * hw]
                            .copy_from_slice(&gd[src..src + cw * hw]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                offset += cw;
            }
            grads
        }),
    )
}

/// Channel-to-space rearrangement: `(B, 4C, H, W) -> (B, C, 2H, 2W)`.
pub fn pixel_shuffle2<T: Scalar>(x: &Var<T>) -> Var<T> {
    let (b, c4, h, w) = x.value().dims4();
    assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    // output (bi, ci, 2y+dy, 2x+dx) <- input (bi, 4ci + 2dy + dx, y, x)
    let index = move |bi: usize, ci: usize, oy: usize, ox: usize| -> usize {
        let (y, dy, xx, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
        ((bi * c4 + ci * 4 + dy * 2 + dx) * h + y) * w + xx
    };
    let xd = x.value().data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    {
        let od = out.data_mut();
        let mut o = 0;
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        od[o] = xd[index(bi, ci, oy, ox)];
                        o += 1;
                    }
                }
            }
        }
    }
    Var::from_op(
        out,
        &[x],
        Box::new(move |args| {
            let gd = args.grad.data();
            let mut g = Tensor::zeros(&[b, c4, h, w]);
            let gm = g.data_mut();
            let mut o = 0;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gm[index(bi, ci, oy, ox)] = gd[o];
                            o += 1;
                        }
                    }
                }
            }
            vec![Some(g)]
        }),
    )
}

/// Spatial mean per channel: `(B, C, H, W) -> (B, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Var<T> {
    let (b, c, h, w) = x.value().dims4();
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let out = Tensor::from_fn(&[b, c, 1, 1], |i| {
        sum_slice(&x.value().data()[i * hw..(i + 1) * hw]) * inv
    });
    Var::from_op(
        out,
        &[x],
        Box::new(move |args| {
            let gd = args.grad.data();
            let g = Tensor::from_fn(&[b, c, h, w], |i| gd[i / hw] * inv);
            vec![Some(g)]
        }),
    )
}

/// `x * s` with `s` of shape `(B, C, 1, 1)` broadcast over space.
pub fn mul_channelwise<T: Scalar>(x: &Var<T>, s: &Var<T>) -> Var<T> {
    let (b, c, h, w) = x.value().dims4();
    assert_eq!(s.shape(), &[b, c, 1, 1]);
    let hw = h * w;
    let sd = s.value().data();
    let out = Tensor::from_fn(&[b, c, h, w], |i| x.value().data()[i] * sd[i / hw]);
    Var::from_op(
        out,
        &[x, s],
        Box::new(move |args| {
            let (xv, sv) = (args.inputs[0], args.inputs[1]);
            let gd = args.grad.data();
            let gx = args.needs[0]
                .then(|| Tensor::from_fn(&[b, c, h, w], |i| gd[i] * sv.data()[i / hw]));
            let gs = args.needs[1].then(|| {
                Tensor::from_fn(&[b, c, 1, 1], |j| {
                    let r = j * hw..(j + 1) * hw;
                    dot_slice(&gd[r.clone()], &xv.data()[r])
                })
            });
            vec![gx, gs]
        }),
    )
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn basic_op_gradients() {
        let x = seeded(&[2, 4, 3, 2], 1);
        let other = Var::constant(seeded(&[2, 4, 3, 2], 2));
        check_unary(&x, |v| mul(v, &other), 1e-8);
        check_unary(&x, |v| sub(&other, v), 1e-8);
        check_unary(&x, |v| narrow_channels(v, 1, 2), 1e-8);
        check_unary(&x, |v| concat_channels(&[v, &other, v]), 1e-8);
        check_unary(&x, pixel_shuffle2, 1e-8);
        check_unary(&x, global_avg_pool, 1e-8);
        check_unary(&x, |v| mul_channelwise(v, &global_avg_pool(v)), 1e-7);
        check_unary(&x, |v| div_abs(v, &Var::constant(Tensor::scalar(-0.7)), 1e-6), 1e-8);
    }

    #[test]
    fn scalar_parameter_gradients() {
        let x = Var::constant(seeded(&[1, 2, 2, 2], 3));
        check_unary(&Tensor::scalar(0.4), |s| mul_scalar(&x, s), 1e-8);
        check_unary(&Tensor::scalar(-1.3), |s| div_abs(&x, s, 1e-6), 1e-7);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Var::constant(Tensor::<f64>::from_fn(&[1, 4, 1, 1], |i| i as f64));
        let y = pixel_shuffle2(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constants_do_not_build_a_graph() {
        let a = Var::constant(Tensor::<f32>::zeros(&[2]));
        let b = add(&a, &a);
        assert!(!b.requires_grad());
    }
}
