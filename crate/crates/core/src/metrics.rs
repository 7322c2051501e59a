//! Image quality metrics on `(B, C, H, W)` tensors with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 4 {
        return Err(Error::Shape(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// `10 log10(peak^2 / MSE)` after clamping `pred`; capped at 100 dB.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    check(pred, target)?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (clamp01(p.as_f64()) - t.as_f64()).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian of odd length `n`.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over every valid 11x11 Gaussian window (sigma 1.5), averaged
/// over channels and batch. Images smaller than the window use the largest
/// odd window that fits.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check(pred, target)?;
    let (b, c, h, w) = pred.dims4();
    let mut n = SSIM_WINDOW.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    if n == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let g = gaussian_window(n, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            let x: Vec<f64> = pred.plane(bi, ci).iter().map(|v| clamp01(v.as_f64())).collect();
            let y: Vec<f64> = target.plane(bi, ci).iter().map(|v| v.as_f64()).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let (mx, ho, wo) = filter_valid(&x, h, w, &g);
            let (my, _, _) = filter_valid(&y, h, w, &g);
            let (sxx, _, _) = filter_valid(&xx, h, w, &g);
            let (syy, _, _) = filter_valid(&yy, h, w, &g);
            let (sxy, _, _) = filter_valid(&xy, h, w, &g);
            let mut acc = 0.0;
            for i in 0..ho * wo {
                let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
                let cov = sxy[i] - mx[i] * my[i];
                acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                    / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            }
            total += acc / (ho * wo) as f64;
        }
    }
    Ok(total / (b * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |i| (i % 17) as f64 / 16.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_error_closed_form() {
        let t = Tensor::<f64>::full(&[1, 3, 8, 8], 0.5);
        let p = t.map(|v| v + 10.0 / 255.0);
        let expect = 20.0 * (255.0f64 / 10.0).log10();
        assert!((psnr(&p, &t, 1.0).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 28.13).abs() < 0.01);
    }

    #[test]
    fn pred_is_clamped() {
        let t = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let p = Tensor::<f64>::full(&[1, 1, 4, 4], 1.5);
        assert_eq!(psnr(&p, &t, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn window_normalized() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 1, 4, 5]);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
