//! Bicubic degradation, stereo samples, patches, augmentation, and a
//! synthetic stereo generator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Kernel parameter of the bicubic resampler.
pub const BICUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with parameter [`BICUBIC_A`].
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four taps `(index, weight)` per output position along one axis, using
/// half-pixel centres and clamped source indices.
pub(crate) fn axis_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = libm::floor(src);
            let t = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = base as i64 - 1 + k as i64;
                let clamped = idx.clamp(0, n_in as i64 - 1) as usize;
                *tap = (clamped, cubic_kernel(t - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of a C×H×W image (width pass, then height pass).
/// No antialiasing prefilter is applied when shrinking.
pub fn bicubic_resample<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    if h < 4 || w < 4 {
        return Err(invalid!("bicubic input {}×{} is smaller than 4×4", h, w));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("degenerate bicubic target {}×{}", out_h, out_w));
    }
    let tx = axis_taps(w, out_w);
    let ty = axis_taps(h, out_h);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = alloc::vec![0.0f64; h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(i, wt)| wt * plane[y * w + i].as_f64()).sum();
            }
        }
        for taps in &ty {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * out_w + x]).sum();
                out.push(T::of(v));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// A rectified stereo pair at HR and LR, images C×H×W in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub hr_left: Tensor<f32>,
    pub hr_right: Tensor<f32>,
    pub lr_left: Tensor<f32>,
    pub lr_right: Tensor<f32>,
    pub id: String,
    pub scale: usize,
}

impl StereoSample {
    /// Builds the LR views by bicubic downsampling by `scale`.
    pub fn from_hr(id: impl Into<String>, hr_left: Tensor<f32>, hr_right: Tensor<f32>, scale: usize) -> Result<Self> {
        let id = id.into();
        if hr_left.shape() != hr_right.shape() {
            return Err(invalid!(
                "{}: left {:?} and right {:?} differ in shape",
                id,
                hr_left.shape(),
                hr_right.shape()
            ));
        }
        let (_, h, w) = hr_left.dims3()?;
        if scale == 0 || h % scale != 0 || w % scale != 0 {
            return Err(invalid!("{}: extents {}×{} not divisible by scale {}", id, h, w, scale));
        }
        let lr_left = bicubic_resample(&hr_left, h / scale, w / scale)?;
        let lr_right = bicubic_resample(&hr_right, h / scale, w / scale)?;
        Ok(Self {
            hr_left,
            hr_right,
            lr_left,
            lr_right,
            id,
            scale,
        })
    }

    pub fn hr_extent(&self) -> (usize, usize) {
        let s = self.hr_left.shape();
        (s[1], s[2])
    }

    /// Bicubic upscale of both LR views back to HR extents.
    pub fn bicubic_baseline(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (h, w) = self.hr_extent();
        Ok((
            bicubic_resample(&self.lr_left, h, w)?,
            bicubic_resample(&self.lr_right, h, w)?,
        ))
    }
}

/// Axis-aligned crop in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Crop placement at both resolutions (LR = HR / scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub hr: Rect,
    pub lr: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub sample: StereoSample,
    pub left: Crop,
    pub right: Crop,
}

pub fn crop(img: &Tensor<f32>, r: Rect) -> Result<Tensor<f32>> {
    let (c, h, w) = img.dims3()?;
    if r.y + r.h > h || r.x + r.w > w {
        return Err(invalid!("crop {:?} outside a {}×{} image", r, h, w));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for y in r.y..r.y + r.h {
            out.extend_from_slice(&d[(ch * h + y) * w + r.x..][..r.w]);
        }
    }
    Tensor::new(&[c, r.h, r.w], out)
}

/// Tiles the sample with HR patches of `patch_h`×`patch_w` at `stride`
/// (HR pixels), crops every view at identical coordinates, and returns the
/// patches in an order shuffled by `rng`.
pub fn extract_patches<R: Rng>(
    sample: &StereoSample,
    patch_h: usize,
    patch_w: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let s = sample.scale;
    if !patch_h.is_multiple_of(s) || !patch_w.is_multiple_of(s) || !stride.is_multiple_of(s) || stride == 0 {
        return Err(invalid!(
            "patch {}×{} and stride {} must be positive multiples of scale {}",
            patch_h,
            patch_w,
            stride,
            s
        ));
    }
    if patch_h / s < 8 || patch_w / s < 8 {
        return Err(invalid!("patch {}×{} is below 8 px at LR", patch_h, patch_w));
    }
    let (h, w) = sample.hr_extent();
    if patch_h > h || patch_w > w {
        return Err(invalid!("patch {}×{} larger than image {}×{}", patch_h, patch_w, h, w));
    }
    let mut out = Vec::new();
    for y in (0..=h - patch_h).step_by(stride) {
        for x in (0..=w - patch_w).step_by(stride) {
            let hr = Rect {
                y,
                x,
                h: patch_h,
                w: patch_w,
            };
            let lr = Rect {
                y: y / s,
                x: x / s,
                h: patch_h / s,
                w: patch_w / s,
            };
            let c = Crop { hr, lr };
            out.push(Patch {
                sample: StereoSample {
                    hr_left: crop(&sample.hr_left, hr)?,
                    hr_right: crop(&sample.hr_right, hr)?,
                    lr_left: crop(&sample.lr_left, lr)?,
                    lr_right: crop(&sample.lr_right, lr)?,
                    id: format!("{}@{},{}", sample.id, y, x),
                    scale: s,
                },
                left: c,
                right: c,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

pub fn flip_vertical(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = img.data();
    Tensor::from_fn(s, |e| {
        let x = e % w;
        let y = (e / w) % h;
        let p = e / (w * h);
        d[(p * h + (h - 1 - y)) * w + x]
    })
}

pub fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let w = *img.shape().last().expect("image has axes");
    let d = img.data();
    Tensor::from_fn(img.shape(), |e| d[e - e % w + (w - 1 - e % w)])
}

impl StereoSample {
    pub fn flipped_vertically(&self) -> Self {
        Self {
            hr_left: flip_vertical(&self.hr_left),
            hr_right: flip_vertical(&self.hr_right),
            lr_left: flip_vertical(&self.lr_left),
            lr_right: flip_vertical(&self.lr_right),
            ..self.clone()
        }
    }

    /// Mirrors every view and exchanges left with right so the pair stays a
    /// valid rectified pair.
    pub fn flipped_horizontally(&self) -> Self {
        Self {
            hr_left: flip_horizontal(&self.hr_right),
            hr_right: flip_horizontal(&self.hr_left),
            lr_left: flip_horizontal(&self.lr_right),
            lr_right: flip_horizontal(&self.lr_left),
            ..self.clone()
        }
    }
}

/// Independent fair coins for a vertical flip and a horizontal flip with view
/// swap.
pub fn augment<R: Rng>(sample: &StereoSample, rng: &mut R) -> StereoSample {
    let mut out = sample.clone();
    if rng.gen_bool(0.5) {
        out = out.flipped_vertically();
    }
    if rng.gen_bool(0.5) {
        out = out.flipped_horizontally();
    }
    out
}

/// Smooth random texture: a sum of random plane waves per channel squashed
/// into [0, 1].
pub fn synthetic_texture(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const WAVES: usize = 8;
    let mut params = Vec::with_capacity(3 * WAVES);
    for _ in 0..3 * WAVES {
        let freq: f64 = rng.gen_range(0.02..0.18);
        let angle: f64 = rng.gen_range(0.0..core::f64::consts::PI);
        let phase: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.3..1.0);
        params.push((
            core::f64::consts::TAU * freq * libm::cos(angle),
            core::f64::consts::TAU * freq * libm::sin(angle),
            phase,
            amp,
        ));
    }
    Tensor::from_fn(&[3, h, w], |e| {
        let x = (e % w) as f64;
        let y = ((e / w) % h) as f64;
        let c = e / (w * h);
        let mut v = 0.0;
        let mut norm = 0.0;
        for &(kx, ky, ph, amp) in &params[c * WAVES..(c + 1) * WAVES] {
            v += amp * libm::sin(kx * x + ky * y + ph);
            norm += amp;
        }
        (0.5 + 0.5 * v / norm) as f32
    })
}

/// Right view is [`synthetic_texture`]; the left view is the right view moved
/// `disparity` pixels to the right with edge clamping:
/// `left(y, x) = right(y, max(x − d, 0))`.
pub fn synthetic_stereo(seed: u64, h: usize, w: usize, disparity: usize, scale: usize) -> Result<StereoSample> {
    if 4 * disparity >= w {
        return Err(invalid!("disparity {} must be below a quarter of width {}", disparity, w));
    }
    let right = synthetic_texture(seed, h, w);
    let rd = right.data();
    let left = Tensor::from_fn(&[3, h, w], |e| {
        let x = e % w;
        rd[e - x + x.saturating_sub(disparity)]
    });
    StereoSample::from_hr(format!("synthetic-{seed}-d{disparity}"), left, right, scale)
}

/// Reads the disparity back from a [`synthetic_stereo`] id.
pub fn synthetic_disparity(id: &str) -> Option<usize> {
    id.split('@').next()?.rsplit_once("-d")?.1.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, h, w], |e| (e / w) as f64 * 0.1 + (e % w) as f64 * 0.05)
    }

    /// Direct evaluation of each output as a double sum over clamped taps.
    fn oracle(img: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
        let (c, h, w) = img.dims3().unwrap();
        let kern = |x: f64| {
            let a = -0.5;
            let x = x.abs();
            if x <= 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        };
        let mut out = Vec::new();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                    let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                    let mut acc = 0.0;
                    for iy in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
                        for ix in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                            let cy = iy.clamp(0, h as i64 - 1) as usize;
                            let cx = ix.clamp(0, w as i64 - 1) as usize;
                            acc += kern(sy - iy as f64) * kern(sx - ix as f64) * img.data()[(ch * h + cy) * w + cx];
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn bicubic_matches_scalar_oracle() {
        let r = ramp(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.gen_range(0.0..1.0));
        for img in [r, n] {
            for (oh, ow) in [(4, 4), (16, 16), (8, 8), (5, 11)] {
                let got = bicubic_resample(&img, oh, ow).unwrap();
                let want = oracle(&img, oh, ow);
                for (g, w) in got.data().iter().zip(&want) {
                    assert!((g - w).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bicubic_kernel_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let s: f64 = (-1..=2).map(|k| cubic_kernel(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_contracts() {
        let c = Tensor::<f32>::full(&[3, 16, 16], 0.3);
        let y = bicubic_resample(&c, 8, 8).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        let big = Tensor::<f32>::zeros(&[3, 512, 512]);
        assert_eq!(bicubic_resample(&big, 256, 256).unwrap().shape(), &[3, 256, 256]);
        assert!(bicubic_resample(&c, 0, 4).is_err());
        assert!(bicubic_resample(&Tensor::<f32>::zeros(&[3, 3, 8]), 2, 4).is_err());
    }

    #[test]
    fn synthetic_construction() {
        let s = synthetic_stereo(4, 32, 96, 0, 2).unwrap();
        assert_eq!(s.hr_left, s.hr_right);
        let d = 7;
        let s = synthetic_stereo(4, 32, 96, d, 2).unwrap();
        assert_eq!(synthetic_disparity(&s.id), Some(d));
        let (l, r) = (s.hr_left.data(), s.hr_right.data());
        for e in 0..l.len() {
            let x = e % 96;
            if x + d < 96 {
                assert_eq!(l[e + d], r[e]);
            }
        }
        assert_eq!(s.lr_left.shape(), &[3, 16, 48]);
        assert_eq!(synthetic_stereo(4, 32, 96, d, 2).unwrap(), s);
        assert_ne!(synthetic_stereo(5, 32, 96, d, 2).unwrap().hr_right, s.hr_right);
        assert!(s.hr_left.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synthetic_stereo(4, 32, 96, 24, 2).is_err());
    }

    #[test]
    fn from_hr_rejects_bad_extents() {
        let a = Tensor::<f32>::zeros(&[3, 9, 8]);
        assert!(StereoSample::from_hr("x", a.clone(), a, 2).is_err());
        let b = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(StereoSample::from_hr("x", b, Tensor::zeros(&[3, 8, 10]), 2).is_err());
    }

    #[test]
    fn patches_tile_and_reassemble() {
        let s = synthetic_stereo(1, 32, 64, 5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = extract_patches(&s, 16, 16, 16, &mut rng).unwrap();
        assert_eq!(patches.len(), 2 * 4);
        let mut hr = Tensor::<f32>::zeros(&[3, 32, 64]);
        let mut lr = Tensor::<f32>::zeros(&[3, 16, 32]);
        for p in &patches {
            assert_eq!(p.left, p.right);
            assert_eq!(p.left.lr.x * 2, p.left.hr.x);
            for (dst, src, r) in [(&mut hr, &p.sample.hr_left, p.left.hr), (&mut lr, &p.sample.lr_left, p.left.lr)] {
                let (_, h, w) = dst.dims3().unwrap();
                for ch in 0..3 {
                    for y in 0..r.h {
                        for x in 0..r.w {
                            dst.data_mut()[(ch * h + r.y + y) * w + r.x + x] = src.data()[(ch * r.h + y) * r.w + x];
                        }
                    }
                }
            }
            // Known disparity inside every patch interior.
            let (l, rt) = (p.sample.hr_left.data(), p.sample.hr_right.data());
            for e in 0..l.len() {
                if e % 16 + 5 < 16 {
                    assert_eq!(l[e + 5], rt[e]);
                }
            }
        }
        assert_eq!(hr, s.hr_left);
        assert_eq!(lr, s.lr_left);
        let overlapping = extract_patches(&s, 16, 16, 8, &mut rng).unwrap();
        assert_eq!(overlapping.len(), 3 * 7);
        assert!(extract_patches(&s, 64, 16, 16, &mut rng).is_err());
        assert!(extract_patches(&s, 15, 16, 16, &mut rng).is_err());
        assert!(extract_patches(&s, 8, 16, 16, &mut rng).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let s = synthetic_stereo(2, 16, 32, 3, 2).unwrap();
        assert_eq!(s.flipped_vertically().flipped_vertically(), s);
        assert_eq!(s.flipped_horizontally().flipped_horizontally(), s);
        let f = s.flipped_horizontally();
        assert_eq!(f.hr_left.data()[31], s.hr_right.data()[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            let a = augment(&s, &mut rng);
            assert!(a.hr_left.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(augment(&s, &mut r1), augment(&s, &mut r2));
    }
}
