//! Image quality metrics.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid!("image shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(invalid!("empty image"));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(peak² / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / m))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            libm::exp(-(x * x) / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Mean local SSIM over every fully contained 11×11 window of every H×W
/// plane (the last two axes), averaged over planes. `peak` is the dynamic
/// range L.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let r = a.rank();
    if r < 2 {
        return Err(invalid!("ssim needs at least two axes, got {:?}", a.shape()));
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("image {}×{} smaller than the {} px SSIM window", h, w, SSIM_WINDOW));
    }
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // Separable filtering: horizontal pass into (h × ow), then vertical.
    let filter = |plane: &[f64]| -> Vec<f64> {
        let mut tmp = alloc::vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
            }
        }
        let mut out = alloc::vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
            }
        }
        out
    };

    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let pa: Vec<f64> = a.data()[p * h * w..][..h * w].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[p * h * w..][..h * w].iter().map(|v| v.as_f64()).collect();
        let aa: Vec<f64> = pa.iter().map(|x| x * x).collect();
        let bb: Vec<f64> = pb.iter().map(|x| x * x).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let (mu_a, mu_b) = (filter(&pa), filter(&pb));
        let (e_aa, e_bb, e_ab) = (filter(&aa), filter(&bb), filter(&ab));
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / planes as f64)
}
