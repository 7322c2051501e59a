use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::conv::{depthwise_conv2d, Padding};
use crate::autograd::Var;
use crate::tensor::{dot_slice, sum_slice, Scalar, Tensor};

/// Mean of `sqrt(d^2 + eps^2)` over all elements.
pub fn charbonnier_mean<T: Scalar>(d: &Var<T>, eps: f64) -> Var<T> {
    let eps2 = T::c(eps * eps);
    let n = T::from_usize(d.value().len()).unwrap();
    let roots: Vec<T> = d.value().data().iter().map(|&v| (v * v + eps2).sqrt()).collect();
    let value = Tensor::scalar(sum_slice(&roots) / n);
    Var::from_op(
        value,
        &[d],
        Box::new(move |args| {
            let g = args.grad.data()[0] / n;
            let dv = args.inputs[0];
            let grad = Tensor::from_fn(dv.shape(), |i| {
                let r = roots[i];
                if r > T::zero() {
                    g * dv.data()[i] / r
                } else {
                    T::zero()
                }
            });
            vec![Some(grad)]
        }),
    )
}

/// `sqrt(||d||^2 + eps^2)` over the whole tensor.
pub fn charbonnier_global<T: Scalar>(d: &Var<T>, eps: f64) -> Var<T> {
    let sq = dot_slice(d.value().data(), d.value().data());
    let root = (sq + T::c(eps * eps)).sqrt();
    Var::from_op(
        Tensor::scalar(root),
        &[d],
        Box::new(move |args| {
            let g = args.grad.data()[0];
            let scale = if root > T::zero() { g / root } else { T::zero() };
            vec![Some(args.inputs[0].scale(scale))]
        }),
    )
}

/// Four-neighbour Laplacian per channel with reflect padding.
pub fn laplacian<T: Scalar>(x: &Var<T>) -> Var<T> {
    let (_, c, _, _) = x.value().dims4();
    let stencil = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let kernel = Tensor::from_fn(&[c, 1, 3, 3], |i| T::c(stencil[i % 9]));
    depthwise_conv2d(x, &Var::constant(kernel), None, Padding::Reflect)
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Mean modulus of the unnormalized 2-D DFT of each `(batch, channel)` plane.
pub fn fft_l1_mean<T: Scalar>(d: &Var<T>) -> Var<T> {
    let (b, c, h, w) = d.value().dims4();
    let hw = h * w;
    let count = (b * c * hw) as f64;
    let mut planner = FftPlanner::new();
    // unit phasors of the spectrum, kept for the backward pass
    let mut phase = vec![Complex::new(0.0, 0.0); b * c * hw];
    let mut total = 0.0;
    for (p, chunk) in phase.chunks_exact_mut(hw).enumerate() {
        for (z, &v) in chunk.iter_mut().zip(d.value().plane(p / c, p % c)) {
            *z = Complex::new(v.as_f64(), 0.0);
        }
        fft2(chunk, h, w, &mut planner, false);
        for z in chunk.iter_mut() {
            let m = z.norm();
            total += m;
            *z = if m > 0.0 { *z / m } else { Complex::new(0.0, 0.0) };
        }
    }
    Var::from_op(
        Tensor::scalar(T::c(total / count)),
        &[d],
        Box::new(move |args| {
            let g = args.grad.data()[0].as_f64() / count;
            let mut planner = FftPlanner::new();
            let mut grad = Tensor::zeros(&[b, c, h, w]);
            let mut buf = vec![Complex::new(0.0, 0.0); hw];
            for (p, chunk) in phase.chunks_exact(hw).enumerate() {
                buf.copy_from_slice(chunk);
                fft2(&mut buf, h, w, &mut planner, true);
                for (dst, z) in grad.data_mut()[p * hw..(p + 1) * hw].iter_mut().zip(&buf) {
                    *dst = T::c(g * z.re);
                }
            }
            vec![Some(grad)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::*;

    /// Direct O(N^2) DFT oracle.
    fn dft_l1_mean(x: &Tensor<f64>) -> f64 {
        let (b, c, h, w) = x.dims4();
        let mut total = 0.0;
        for bi in 0..b {
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        let mut z = Complex::new(0.0, 0.0);
                        for y in 0..h {
                            for xx in 0..w {
                                let ang = -2.0
                                    * std::f64::consts::PI
                                    * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                                z += Complex::from_polar(x.at(bi, ci, y, xx), ang);
                            }
                        }
                        total += z.norm();
                    }
                }
            }
        }
        total / x.len() as f64
    }

    #[test]
    fn fft_loss_matches_direct_dft() {
        let x = seeded(&[2, 2, 3, 4], 1);
        let got = fft_l1_mean(&Var::constant(x.clone())).value().data()[0];
        assert!((got - dft_l1_mean(&x)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let x = seeded(&[2, 2, 4, 4], 2);
        check_unary(&x, |v| charbonnier_mean(v, 1e-3), 1e-7);
        check_unary(&x, |v| charbonnier_global(v, 1e-3), 1e-7);
        check_unary(&x, fft_l1_mean, 1e-7);
        check_unary(&x, laplacian, 1e-8);
    }
}
