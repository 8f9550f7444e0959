//! Training objective: SR reconstruction, parallax attention regularizers,
//! and stereo consistency.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::pam::AttentionMaps;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-term multipliers; a zero weight removes the term from the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sr: f64,
    pub photometric: f64,
    pub smooth: f64,
    pub cycle: f64,
    pub stereo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sr: 1.0,
            photometric: 1.0,
            smooth: 1.0,
            cycle: 1.0,
            stereo: 1.0,
        }
    }
}

/// Scalar loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub sr: Var,
    pub photometric: Var,
    pub smooth: Var,
    pub cycle: Var,
    pub stereo: Var,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_sr: f64,
    pub l_photometric: f64,
    pub l_smooth: f64,
    pub l_cycle: f64,
    pub l_pam: f64,
    pub l_stereo: f64,
    pub total: f64,
    /// Non-fatal conditions met while computing the terms, such as an
    /// all-invalid mask.
    pub warnings: Vec<String>,
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(invalid!(
            "{}: shapes {:?} and {:?} differ",
            what,
            tape.value(a).shape(),
            tape.value(b).shape()
        ));
    }
    Ok(())
}

/// Mean squared error averaged over both views.
pub fn sr_loss<T: Real>(tape: &mut Tape<T>, sr_l: Var, sr_r: Var, hr_l: Var, hr_r: Var) -> Result<Var> {
    same_shape(tape, sr_l, hr_l, "sr_loss left")?;
    same_shape(tape, sr_r, hr_r, "sr_loss right")?;
    let dl = tape.sub(sr_l, hr_l)?;
    let dr = tape.sub(sr_r, hr_r)?;
    let both = tape.concat(&[dl, dr], 0)?;
    let sq = tape.square(both)?;
    tape.mean(sq)
}

/// Mean of |a − b| over positions where `mask` (B×1×H×W) is one, across all
/// channels. `None` when the mask selects nothing.
fn masked_mae<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, mask: &Tensor<T>) -> Result<Option<Var>> {
    same_shape(tape, a, b, "masked error")?;
    let (_, c, _, _) = tape.value(a).dims4()?;
    let count: f64 = mask.data().iter().map(|v| v.as_f64()).sum();
    if count == 0.0 {
        return Ok(None);
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    let m = tape.constant(mask.clone());
    let d = tape.mul(d, m)?;
    let s = tape.sum(d)?;
    Ok(Some(tape.scale(s, 1.0 / (count * c as f64))?))
}

fn sum_present<T: Real>(tape: &mut Tape<T>, parts: &[Option<Var>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in parts.iter().flatten() {
        acc = Some(match acc {
            None => p,
            Some(a) => tape.add(a, p)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => zero(tape),
    })
}

/// Per-row identity B×H×W×W.
fn row_identity<T: Real>(b: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[b, h, w, w], |e| {
        if (e % (w * w)) / w == e % w {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `(photometric, smooth, cycle)`.
///
/// Photometric: masked L1 between each LR view and the other view warped onto
/// it. Smooth: mean |Δ| of both maps between adjacent rows and between
/// diagonal neighbours (i, j) → (i+1, j+1), so a constant disparity costs
/// nothing. Cycle: masked L1 between both cycle maps and the identity, as one
/// mean over the rows of both maps.
pub fn pam_loss<T: Real>(
    tape: &mut Tape<T>,
    maps: &AttentionMaps<T>,
    lr_l: Var,
    lr_r: Var,
    warnings: &mut Vec<String>,
) -> Result<(Var, Var, Var)> {
    same_shape(tape, lr_l, lr_r, "pam_loss views")?;
    let (b, _, h, w) = tape.value(lr_l).dims4()?;
    if tape.value(maps.m_r2l).shape() != [b, h, w, w] {
        return Err(invalid!(
            "attention maps {:?} do not match LR views {:?}",
            tape.value(maps.m_r2l).shape(),
            tape.value(lr_l).shape()
        ));
    }

    let wl = tape.warp(maps.m_r2l, lr_r)?;
    let wr = tape.warp(maps.m_l2r, lr_l)?;
    let pl = masked_mae(tape, wl, lr_l, &maps.v_left)?;
    let pr = masked_mae(tape, wr, lr_r, &maps.v_right)?;
    if pl.is_none() {
        warnings.push("left valid mask is empty; photometric term skipped".into());
    }
    if pr.is_none() {
        warnings.push("right valid mask is empty; photometric term skipped".into());
    }
    let photometric = sum_present(tape, &[pl, pr])?;

    let mut smooth_parts = Vec::new();
    for m in [maps.m_r2l, maps.m_l2r] {
        if h > 1 {
            let d = tape.diff(m, 1)?;
            let d = tape.abs(d)?;
            smooth_parts.push(Some(tape.mean(d)?));
        }
        if w > 1 {
            let d = tape.diag_diff(m)?;
            let d = tape.abs(d)?;
            smooth_parts.push(Some(tape.mean(d)?));
        }
    }
    let smooth = sum_present(tape, &smooth_parts)?;

    let count: f64 = maps.v_left.data().iter().chain(maps.v_right.data()).map(|v| v.as_f64()).sum();
    let cycle = if count == 0.0 {
        warnings.push("both valid masks are empty; cycle term skipped".into());
        zero(tape)
    } else {
        let eye = tape.constant(row_identity(b, h, w));
        let mut parts = Vec::with_capacity(2);
        for (cm, v) in [(maps.cycle_l, &maps.v_left), (maps.cycle_r, &maps.v_right)] {
            let d = tape.sub(cm, eye)?;
            let d = tape.abs(d)?;
            let rows = tape.constant(v.reshape(&[b, h, w, 1])?);
            let d = tape.mul(d, rows)?;
            parts.push(Some(tape.sum(d)?));
        }
        let s = sum_present(tape, &parts)?;
        tape.scale(s, 1.0 / (count * w as f64))?
    };
    Ok((photometric, smooth, cycle))
}

/// Nearest-neighbour upscaling of a B×1×H×W mask.
pub fn upscale_mask<T: Real>(mask: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = mask.dims4()?;
    let d = mask.data();
    let (oh, ow) = (h * s, w * s);
    Ok(Tensor::from_fn(&[b, c, oh, ow], |e| {
        let x = e % ow;
        let y = (e / ow) % oh;
        let bc = e / (ow * oh);
        d[(bc * h + y / s) * w + x / s]
    }))
}

/// Masked L1 between each SR view and the other SR view warped through the
/// attention maps upscaled to SR resolution.
pub fn stereo_consistency_loss<T: Real>(
    tape: &mut Tape<T>,
    sr_l: Var,
    sr_r: Var,
    maps: &AttentionMaps<T>,
    warnings: &mut Vec<String>,
) -> Result<Var> {
    same_shape(tape, sr_l, sr_r, "stereo loss views")?;
    let (_, _, sh, sw) = tape.value(sr_l).dims4()?;
    let (_, h, w, _) = tape.value(maps.m_r2l).dims4()?;
    if h == 0 || w == 0 || sh % h != 0 || sw % w != 0 || sh / h != sw / w {
        return Err(invalid!(
            "SR extents {}×{} are not a common multiple of attention extents {}×{}",
            sh,
            sw,
            h,
            w
        ));
    }
    let s = sh / h;
    let up_r2l = tape.upscale_attention(maps.m_r2l, s)?;
    let up_l2r = tape.upscale_attention(maps.m_l2r, s)?;
    let wl = tape.warp(up_r2l, sr_r)?;
    let wr = tape.warp(up_l2r, sr_l)?;
    let pl = masked_mae(tape, wl, sr_l, &upscale_mask(&maps.v_left, s)?)?;
    let pr = masked_mae(tape, wr, sr_r, &upscale_mask(&maps.v_right, s)?)?;
    if pl.is_none() || pr.is_none() {
        warnings.push("empty valid mask; stereo term skipped for that view".into());
    }
    sum_present(tape, &[pl, pr])
}

/// Weighted sum of the terms plus the scalar breakdown.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    weights: &LossWeights,
    warnings: Vec<String>,
) -> Result<(Var, LossBreakdown)> {
    let pairs = [
        (terms.sr, weights.sr),
        (terms.photometric, weights.photometric),
        (terms.smooth, weights.smooth),
        (terms.cycle, weights.cycle),
        (terms.stereo, weights.stereo),
    ];
    let mut total: Option<Var> = None;
    for (v, wgt) in pairs {
        if tape.value(v).numel() != 1 {
            return Err(invalid!("loss term is not a scalar: {:?}", tape.value(v).shape()));
        }
        if wgt == 0.0 {
            continue;
        }
        let t = if wgt == 1.0 { v } else { tape.scale(v, wgt)? };
        total = Some(match total {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => zero(tape),
    };
    let get = |v: Var| tape.value(v).data()[0].as_f64();
    let (l_photometric, l_smooth, l_cycle) = (get(terms.photometric), get(terms.smooth), get(terms.cycle));
    let breakdown = LossBreakdown {
        l_sr: get(terms.sr),
        l_photometric,
        l_smooth,
        l_cycle,
        l_pam: l_photometric + l_smooth + l_cycle,
        l_stereo: get(terms.stereo),
        total: get(total),
        warnings,
    };
    Ok((total, breakdown))
}

/// Every term for one stereo batch: LR and HR views plus the model outputs.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss<T: Real>(
    tape: &mut Tape<T>,
    sr_l: Var,
    sr_r: Var,
    maps: &AttentionMaps<T>,
    lr_l: Var,
    lr_r: Var,
    hr_l: Var,
    hr_r: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut warnings = Vec::new();
    let sr = sr_loss(tape, sr_l, sr_r, hr_l, hr_r)?;
    let (photometric, smooth, cycle) = pam_loss(tape, maps, lr_l, lr_r, &mut warnings)?;
    let stereo = stereo_consistency_loss(tape, sr_l, sr_r, maps, &mut warnings)?;
    let terms = LossTerms {
        sr,
        photometric,
        smooth,
        cycle,
        stereo,
    };
    total_loss(tape, &terms, weights, warnings)
}

impl LossBreakdown {
    /// Single-line rendering for logs.
    pub fn summary(&self) -> String {
        format!(
            "total {:.6} (sr {:.6}, photometric {:.6}, smooth {:.6}, cycle {:.6}, stereo {:.6})",
            self.total, self.l_sr, self.l_photometric, self.l_smooth, self.l_cycle, self.l_stereo
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pam::valid_mask;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    /// Maps recorded as constants, with masks derived as the module does.
    fn maps_from(t: &mut Tape<f64>, m_r2l: Tensor<f64>, m_l2r: Tensor<f64>) -> AttentionMaps<f64> {
        let v_left = valid_mask(&m_r2l, 0.1).unwrap();
        let v_right = valid_mask(&m_l2r, 0.1).unwrap();
        let a = t.constant(m_r2l);
        let b = t.constant(m_l2r);
        let cycle_l = t.bmm(a, b).unwrap();
        let cycle_r = t.bmm(b, a).unwrap();
        AttentionMaps {
            scores: a,
            m_r2l: a,
            m_l2r: b,
            cycle_l,
            cycle_r,
            v_left,
            v_right,
            tau: 0.1,
        }
    }

    fn row_stochastic(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = rand(shape, seed);
        let w = shape[3];
        for row in t.data_mut().chunks_mut(w) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    #[test]
    fn sr_loss_examples() {
        let mut t = Tape::new();
        let a = t.constant(rand(&[1, 3, 2, 2], 1));
        let z = sr_loss(&mut t, a, a, a, a).unwrap();
        assert_eq!(t.value(z).item().unwrap(), 0.0);
        let b = t.constant(t.value(a).map(|v| v + 0.3));
        let d = sr_loss(&mut t, b, b, a, a).unwrap();
        assert!((t.value(d).item().unwrap() - 0.09).abs() < 1e-12);

        let (sl, sr, hl, hr) = (rand(&[1, 3, 2, 2], 2), rand(&[1, 3, 2, 2], 3), rand(&[1, 3, 2, 2], 4), rand(&[1, 3, 2, 2], 5));
        let mut acc = 0.0;
        for (s, h) in [(&sl, &hl), (&sr, &hr)] {
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        let i = (c * 2 + y) * 2 + x;
                        acc += (s.data()[i] - h.data()[i]).powi(2);
                    }
                }
            }
        }
        let oracle = acc / 24.0;
        let v: Vec<Var> = [sl, sr, hl, hr].into_iter().map(|x| t.constant(x)).collect();
        let l = sr_loss(&mut t, v[0], v[1], v[2], v[3]).unwrap();
        assert!((t.value(l).item().unwrap() - oracle).abs() < 1e-12);
        let bad = t.constant(Tensor::zeros(&[1, 3, 2, 3]));
        assert!(sr_loss(&mut t, v[0], v[1], bad, v[3]).is_err());
    }

    #[test]
    fn identity_maps_identical_views_zero_pam_loss() {
        let mut t = Tape::new();
        let eye = row_identity::<f64>(1, 3, 4);
        let maps = maps_from(&mut t, eye.clone(), eye);
        let img = t.constant(rand(&[1, 3, 3, 4], 1));
        let mut warn = Vec::new();
        let (p, s, c) = pam_loss(&mut t, &maps, img, img, &mut warn).unwrap();
        for v in [p, s, c] {
            assert_eq!(t.value(v).item().unwrap(), 0.0);
        }
        assert!(warn.is_empty());
    }

    #[test]
    fn constant_images_zero_photometric() {
        let mut t = Tape::new();
        let maps = maps_from(&mut t, row_stochastic(&[2, 3, 4, 4], 1), row_stochastic(&[2, 3, 4, 4], 2));
        let img = t.constant(Tensor::full(&[2, 3, 3, 4], 0.4));
        let (p, s, c) = pam_loss(&mut t, &maps, img, img, &mut Vec::new()).unwrap();
        assert!(t.value(p).item().unwrap().abs() < 1e-12);
        assert!(t.value(s).item().unwrap() > 0.0);
        assert!(t.value(c).item().unwrap() > 0.0);
    }

    #[test]
    fn uniform_two_wide_cycle_is_half() {
        let mut t = Tape::new();
        let u = Tensor::full(&[1, 2, 2, 2], 0.5);
        let maps = maps_from(&mut t, u.clone(), u);
        let img = t.constant(rand(&[1, 3, 2, 2], 3));
        let (_, s, c) = pam_loss(&mut t, &maps, img, img, &mut Vec::new()).unwrap();
        // Every entry of each cycle map is 1/2 against identity entries 1 or 0.
        assert!((t.value(c).item().unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(t.value(s).item().unwrap(), 0.0);
    }

    #[test]
    fn empty_masks_warn_instead_of_failing() {
        let mut t = Tape::new();
        let u = Tensor::full(&[1, 1, 2, 2], 0.5);
        let mut maps = maps_from(&mut t, u.clone(), u);
        maps.v_left = Tensor::zeros(&[1, 1, 1, 2]);
        maps.v_right = Tensor::zeros(&[1, 1, 1, 2]);
        let img = t.constant(rand(&[1, 3, 1, 2], 4));
        let other = t.constant(rand(&[1, 3, 1, 2], 5));
        let mut warn = Vec::new();
        let (p, _, c) = pam_loss(&mut t, &maps, img, other, &mut warn).unwrap();
        assert_eq!(t.value(p).item().unwrap(), 0.0);
        assert_eq!(t.value(c).item().unwrap(), 0.0);
        assert_eq!(warn.len(), 3);
    }

    #[test]
    fn stereo_loss_examples() {
        let mut t = Tape::new();
        let eye = row_identity::<f64>(1, 2, 3);
        let maps = maps_from(&mut t, eye.clone(), eye);
        // Upscaled identity averages each 2-wide column pair, so the zero case
        // holds for views that are constant over 2×2 blocks.
        let lr = rand(&[1, 3, 2, 3], 1);
        let blocky = Tensor::from_fn(&[1, 3, 4, 6], |e| lr.data()[(e / 24) * 6 + ((e / 6) % 4) / 2 * 3 + (e % 6) / 2]);
        let sr = t.constant(blocky);
        let l = stereo_consistency_loss(&mut t, sr, sr, &maps, &mut Vec::new()).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);
        let rough = t.constant(rand(&[1, 3, 4, 6], 11));
        let l = stereo_consistency_loss(&mut t, rough, rough, &maps, &mut Vec::new()).unwrap();
        assert!(t.value(l).item().unwrap() > 0.0);

        let maps = maps_from(&mut t, row_stochastic(&[1, 2, 3, 3], 2), row_stochastic(&[1, 2, 3, 3], 3));
        let c = t.constant(Tensor::full(&[1, 3, 4, 6], 0.8));
        let l = stereo_consistency_loss(&mut t, c, c, &maps, &mut Vec::new()).unwrap();
        assert!(t.value(l).item().unwrap().abs() < 1e-12);

        let bad = t.constant(Tensor::full(&[1, 3, 4, 5], 0.8));
        assert!(stereo_consistency_loss(&mut t, bad, bad, &maps, &mut Vec::new()).is_err());
    }

    #[test]
    fn stereo_loss_matches_scalar_oracle() {
        let (h, w, s, c) = (1usize, 2usize, 2usize, 2usize);
        let m_r2l = row_stochastic(&[1, h, w, w], 7);
        let m_l2r = row_stochastic(&[1, h, w, w], 8);
        let sl = rand(&[1, c, h * s, w * s], 9);
        let sr = rand(&[1, c, h * s, w * s], 10);
        let mut t = Tape::new();
        let maps = maps_from(&mut t, m_r2l.clone(), m_l2r.clone());
        let (vl, vr) = (maps.v_left.clone(), maps.v_right.clone());
        let a = t.constant(sl.clone());
        let b = t.constant(sr.clone());
        let got = stereo_consistency_loss(&mut t, a, b, &maps, &mut Vec::new()).unwrap();

        let (sh, sw) = (h * s, w * s);
        let term = |m: &Tensor<f64>, v: &Tensor<f64>, tgt: &Tensor<f64>, src: &Tensor<f64>| {
            let (mut acc, mut n) = (0.0, 0.0);
            for ch in 0..c {
                for y in 0..sh {
                    for i in 0..sw {
                        let valid = v.data()[(y / s) * w + i / s];
                        if valid == 0.0 {
                            continue;
                        }
                        let mut warped = 0.0;
                        for j in 0..sw {
                            let wgt = m.data()[((y / s) * w + i / s) * w + j / s] / s as f64;
                            warped += wgt * src.data()[(ch * sh + y) * sw + j];
                        }
                        acc += (warped - tgt.data()[(ch * sh + y) * sw + i]).abs();
                        n += 1.0;
                    }
                }
            }
            acc / n
        };
        let oracle = term(&m_r2l, &vl, &sl, &sr) + term(&m_l2r, &vr, &sr, &sl);
        assert!((t.value(got).item().unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut t = Tape::<f64>::new();
        let vals = [0.5, 0.25, 0.125, 0.0625, 2.0];
        let v: Vec<Var> = vals.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms {
            sr: v[0],
            photometric: v[1],
            smooth: v[2],
            cycle: v[3],
            stereo: v[4],
        };
        let (_, b) = total_loss(&mut t, &terms, &LossWeights::default(), vec![]).unwrap();
        assert!((b.total - (b.l_sr + b.l_pam + b.l_stereo)).abs() < 1e-6);
        assert_eq!(b.l_pam, 0.4375);
        let (_, b2) = total_loss(
            &mut t,
            &terms,
            &LossWeights {
                sr: 2.0,
                ..LossWeights::default()
            },
            vec![],
        )
        .unwrap();
        assert_eq!(b2.total - b.total, 0.5);
        let z: Vec<Var> = (0..5).map(|_| t.constant(Tensor::scalar(0.0))).collect();
        let zt = LossTerms {
            sr: z[0],
            photometric: z[1],
            smooth: z[2],
            cycle: z[3],
            stereo: z[4],
        };
        assert_eq!(total_loss(&mut t, &zt, &LossWeights::default(), vec![]).unwrap().1.total, 0.0);
    }
}
