use crate::autograd::Var;
use crate::tensor::{matmul, sum_slice, Scalar, Tensor};

/// Border handling for stride-1 "same" depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`d c b | a b c d | c b a`).
    Reflect,
}

/// Reflects an out-of-range index back into `0..n`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let n = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let n = ho * wo;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) with zero padding.
///
/// `x: (B, Ci, H, W)`, `weight: (Co, Ci, k, k)`, `bias: (Co)`.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Var<T> {
    let (b, ci, h, w) = x.value().dims4();
    let ws = weight.shape();
    assert!(
        ws.len() == 4 && ws[1] == ci && ws[2] == ws[3],
        "conv2d weight {ws:?} incompatible with input channels {ci}"
    );
    let (co, k) = (ws[0], ws[2]);
    if let Some(bv) = bias {
        assert_eq!(bv.shape(), &[co], "conv2d bias shape");
    }
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let (hw, n) = (h * w, ho * wo);
    let kk = ci * k * k;
    let pointwise = k == 1 && stride == 1 && pad == 0;

    let xd = x.value().data();
    let wd = weight.value().data();
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * n] };
    {
        let od = out.data_mut();
        for bi in 0..b {
            let xb = &xd[bi * ci * hw..(bi + 1) * ci * hw];
            let yb = &mut od[bi * co * n..(bi + 1) * co * n];
            if pointwise {
                matmul(co, ci, n, wd, false, xb, false, yb, false);
            } else {
                im2col(xb, ci, h, w, k, stride, pad, ho, wo, &mut cols);
                matmul(co, kk, n, wd, false, &cols, false, yb, false);
            }
            if let Some(bv) = bias {
                for (o, &bb) in bv.value().data().iter().enumerate() {
                    for v in &mut yb[o * n..(o + 1) * n] {
                        *v += bb;
                    }
                }
            }
        }
    }

    let mut parents = vec![x, weight];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    Var::from_op(
        out,
        &parents,
        Box::new(move |args| {
            let xd = args.inputs[0].data();
            let wd = args.inputs[1].data();
            let gd = args.grad.data();
            let mut gx = args.needs[0].then(|| Tensor::zeros(&[b, ci, h, w]));
            let mut gw = args.needs[1].then(|| Tensor::zeros(&[co, ci, k, k]));
            let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * n] };
            let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); kk * n] };
            for bi in 0..b {
                let gy = &gd[bi * co * n..(bi + 1) * co * n];
                let xb = &xd[bi * ci * hw..(bi + 1) * ci * hw];
                if let Some(gw) = gw.as_mut() {
                    if pointwise {
                        matmul(co, n, ci, gy, false, xb, true, gw.data_mut(), true);
                    } else {
                        im2col(xb, ci, h, w, k, stride, pad, ho, wo, &mut cols);
                        matmul(co, n, kk, gy, false, &cols, true, gw.data_mut(), true);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx.data_mut()[bi * ci * hw..(bi + 1) * ci * hw];
                    if pointwise {
                        matmul(ci, co, n, wd, true, gy, false, gxb, true);
                    } else {
                        matmul(kk, co, n, wd, true, gy, false, &mut dcols, false);
                        col2im_add(&dcols, ci, h, w, k, stride, pad, ho, wo, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    Tensor::from_fn(&[co], |o| {
                        (0..b)
                            .map(|bi| sum_slice(&gd[(bi * co + o) * n..(bi * co + o + 1) * n]))
                            .sum()
                    })
                }));
            }
            grads
        }),
    )
}

/// Builds a padded copy of one plane; `None` entries in the maps are zeros.
fn pad_plane<T: Scalar>(
    src: &[T],
    w: usize,
    rows: &[Option<usize>],
    cols: &[Option<usize>],
    dst: &mut [T],
) {
    let wp = cols.len();
    for (py, ry) in rows.iter().enumerate() {
        let drow = &mut dst[py * wp..(py + 1) * wp];
        match ry {
            None => drow.fill(T::zero()),
            Some(ry) => {
                let srow = &src[ry * w..(ry + 1) * w];
                let p = (wp - w) / 2;
                drow[p..p + w].copy_from_slice(srow);
                for i in (0..p).chain(p + w..wp) {
                    drow[i] = cols[i].map_or(T::zero(), |cx| srow[cx]);
                }
            }
        }
    }
}

fn index_map(n: usize, pad: usize, padding: Padding) -> Vec<Option<usize>> {
    (0..n + 2 * pad)
        .map(|i| {
            let j = i as isize - pad as isize;
            if j >= 0 && (j as usize) < n {
                Some(j as usize)
            } else {
                match padding {
                    Padding::Zero => None,
                    Padding::Reflect => Some(reflect_index(j, n)),
                }
            }
        })
        .collect()
}

/// `out[y][x] = sum kern[ky][kx] * src[(y + ky) * src_w + x + kx]` over an
/// `out_h x out_w` window; `out` is accumulated into.
fn correlate_plane<T: Scalar>(src: &[T], src_w: usize, kern: &[T], k: usize, out: &mut [T], out_h: usize, out_w: usize) {
    if k == 3 {
        let [k0, k1, k2, k3, k4, k5, k6, k7, k8] = [
            kern[0], kern[1], kern[2], kern[3], kern[4], kern[5], kern[6], kern[7], kern[8],
        ];
        for y in 0..out_h {
            let row = |r: usize, dx: usize| &src[(y + r) * src_w + dx..][..out_w];
            let (a0, a1, a2) = (row(0, 0), row(0, 1), row(0, 2));
            let (b0, b1, b2) = (row(1, 0), row(1, 1), row(1, 2));
            let (c0, c1, c2) = (row(2, 0), row(2, 1), row(2, 2));
            let d = &mut out[y * out_w..(y + 1) * out_w];
            for x in 0..d.len() {
                d[x] += k0 * a0[x]
                    + k1 * a1[x]
                    + k2 * a2[x]
                    + k3 * b0[x]
                    + k4 * b1[x]
                    + k5 * b2[x]
                    + k6 * c0[x]
                    + k7 * c1[x]
                    + k8 * c2[x];
            }
        }
        return;
    }
    for y in 0..out_h {
        let d = &mut out[y * out_w..(y + 1) * out_w];
        for ky in 0..k {
            for kx in 0..k {
                let wv = kern[ky * k + kx];
                let srow = &src[(y + ky) * src_w + kx..][..out_w];
                for (o, &v) in d.iter_mut().zip(srow) {
                    *o += wv * v;
                }
            }
        }
    }
}

/// Stride-1 "same" depthwise convolution with an odd `k x k` kernel.
///
/// `x: (B, C, H, W)`, `weight: (C, 1, k, k)`, `bias: (C)`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    padding: Padding,
) -> Var<T> {
    let (b, c, h, w) = x.value().dims4();
    let ws = weight.shape();
    assert!(
        ws.len() == 4 && ws[0] == c && ws[1] == 1 && ws[2] == ws[3] && ws[2] % 2 == 1,
        "depthwise weight {ws:?} incompatible with {c} channels"
    );
    if let Some(bv) = bias {
        assert_eq!(bv.shape(), &[c], "depthwise bias shape");
    }
    let k = ws[2];
    let p = k / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let rows = index_map(h, p, padding);
    let colm = index_map(w, p, padding);
    let hw = h * w;

    let xd = x.value().data();
    let wd = weight.value().data();
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let mut padded = vec![T::zero(); hp * wp];
    {
        let od = out.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let plane = (bi * c + ch) * hw;
                pad_plane(&xd[plane..plane + hw], w, &rows, &colm, &mut padded);
                let dst = &mut od[plane..plane + hw];
                if let Some(bv) = bias {
                    dst.fill(bv.value().data()[ch]);
                }
                correlate_plane(&padded, wp, &wd[ch * k * k..(ch + 1) * k * k], k, dst, h, w);
            }
        }
    }

    let mut parents = vec![x, weight];
    if let Some(bv) = bias {
        parents.push(bv);
    }
    Var::from_op(
        out,
        &parents,
        Box::new(move |args| {
            let xd = args.inputs[0].data();
            let wd = args.inputs[1].data();
            let gd = args.grad.data();
            let mut gx = args.needs[0].then(|| Tensor::zeros(&[b, c, h, w]));
            let mut gw = args.needs[1].then(|| Tensor::zeros(&[c, 1, k, k]));
            let mut padded = vec![T::zero(); hp * wp];
            // gradient zero-padded by k - 1 on every side
            let (gh, gwid) = (h + 4 * p, w + 4 * p);
            let mut gz = vec![T::zero(); gh * gwid];
            let mut gpad = vec![T::zero(); hp * wp];
            let mut lanes = vec![T::zero(); k * k * w];
            let mut flipped = vec![T::zero(); k * k];
            for bi in 0..b {
                for ch in 0..c {
                    let plane = (bi * c + ch) * hw;
                    let g = &gd[plane..plane + hw];
                    if let Some(gw) = gw.as_mut() {
                        pad_plane(&xd[plane..plane + hw], w, &rows, &colm, &mut padded);
                        lanes.fill(T::zero());
                        for y in 0..h {
                            let grow = &g[y * w..(y + 1) * w];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let srow = &padded[(y + ky) * wp + kx..][..w];
                                    let lane = &mut lanes[(ky * k + kx) * w..][..w];
                                    for ((l, &sv), &gv) in lane.iter_mut().zip(srow).zip(grow) {
                                        *l += sv * gv;
                                    }
                                }
                            }
                        }
                        let gk = &mut gw.data_mut()[ch * k * k..(ch + 1) * k * k];
                        for (t, lane) in gk.iter_mut().zip(lanes.chunks_exact(w)) {
                            *t += sum_slice(lane);
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for y in 0..h {
                            gz[(y + 2 * p) * gwid + 2 * p..][..w].copy_from_slice(&g[y * w..(y + 1) * w]);
                        }
                        let kern = &wd[ch * k * k..(ch + 1) * k * k];
                        for (f, v) in flipped.iter_mut().zip(kern.iter().rev()) {
                            *f = *v;
                        }
                        gpad.fill(T::zero());
                        correlate_plane(&gz, gwid, &flipped, k, &mut gpad, hp, wp);
                        let gxp = &mut gx.data_mut()[plane..plane + hw];
                        for (py, ry) in rows.iter().enumerate() {
                            let Some(ry) = ry else { continue };
                            let src = &gpad[py * wp..(py + 1) * wp];
                            let dst = &mut gxp[ry * w..(ry + 1) * w];
                            for (d, &v) in dst.iter_mut().zip(&src[p..p + w]) {
                                *d += v;
                            }
                            for px in (0..p).chain(p + w..wp) {
                                if let Some(cx) = colm[px] {
                                    dst[cx] += src[px];
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    Tensor::from_fn(&[c], |ch| {
                        (0..b)
                            .map(|bi| sum_slice(&gd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]))
                            .sum()
                    })
                }));
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (b, ci, h, ww) = x.dims4();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (ww + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < ww {
                                        acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                            * x.at(bi, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let x = seeded(&[2, 3, 5, 6], 1);
        for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (2, 2, 0), (3, 2, 1)] {
            let w = seeded(&[4, 3, k, k], 2);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let y = conv2d(
                &Var::constant(x.clone()),
                &Var::constant(w.clone()),
                Some(&Var::constant(Tensor::from_vec(&[4], bias.to_vec()).unwrap())),
                stride,
                pad,
            );
            let expected = naive_conv(&x, &w, &bias, stride, pad);
            assert_eq!(y.shape(), expected.shape());
            assert!(max_rel_err(y.value(), &expected) < 1e-12);
        }
    }

    #[test]
    fn conv2d_gradients() {
        let x = seeded(&[2, 3, 4, 4], 3);
        let w = seeded(&[2, 3, 3, 3], 4);
        let bias = seeded(&[2], 5);
        for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (1, 1, 0)] {
            let wk = if k == 3 { w.clone() } else { seeded(&[2, 3, k, k], 6) };
            let (wv, bv) = (Var::constant(wk.clone()), Var::constant(bias.clone()));
            check_unary(&x, |v| conv2d(v, &wv, Some(&bv), stride, pad), 1e-7);
            let xv = Var::constant(x.clone());
            check_unary(&wk, |v| conv2d(&xv, v, Some(&bv), stride, pad), 1e-7);
            let wv = Var::constant(wk.clone());
            check_unary(&bias, |v| conv2d(&xv, &wv, Some(v), stride, pad), 1e-7);
        }
    }

    #[test]
    fn depthwise_gradients_both_paddings() {
        let x = seeded(&[2, 3, 4, 5], 7);
        let w = seeded(&[3, 1, 3, 3], 8);
        let bias = seeded(&[3], 9);
        for padding in [Padding::Zero, Padding::Reflect] {
            let (wv, bv) = (Var::constant(w.clone()), Var::constant(bias.clone()));
            check_unary(&x, |v| depthwise_conv2d(v, &wv, Some(&bv), padding), 1e-7);
            let xv = Var::constant(x.clone());
            check_unary(&w, |v| depthwise_conv2d(&xv, v, Some(&bv), padding), 1e-7);
            check_unary(&bias, |v| depthwise_conv2d(&xv, &wv, Some(v), padding), 1e-7);
        }
    }

    #[test]
    fn depthwise_zero_padding_matches_dense_conv() {
        let x = seeded(&[1, 2, 4, 4], 10);
        let w = seeded(&[2, 1, 3, 3], 11);
        let y = depthwise_conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, Padding::Zero);
        // dense weight with zeros off the diagonal
        let mut dense = Tensor::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            for i in 0..9 {
                dense.data_mut()[(c * 2 + c) * 9 + i] = w.data()[c * 9 + i];
            }
        }
        let expected = naive_conv(&x, &dense, &[0.0, 0.0], 1, 1);
        assert!(max_rel_err(y.value(), &expected) < 1e-12);
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(2, 2), 0);
    }

    #[test]
    fn reflect_depthwise_on_tiny_planes_stays_finite() {
        let x = seeded(&[1, 1, 1, 1], 12);
        let w = seeded(&[1, 1, 3, 3], 13);
        let y = depthwise_conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, Padding::Reflect);
        let expected = x.data()[0] * w.sum();
        assert!((y.value().data()[0] - expected).abs() < 1e-12);
    }
}
