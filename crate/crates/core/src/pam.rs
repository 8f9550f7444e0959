//! Parallax attention: per-row cross-view attention, warping, cycle maps,
//! valid masks, and feature fusion.

use alloc::format;

use crate::blocks::{res_block, Conv, ResBlockParams};
use crate::error::{invalid, Result};
use crate::params::{Bound, ParamInit};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default occlusion threshold on received attention mass.
pub const DEFAULT_TAU: f64 = 0.1;

/// Learnable parts of the parallax attention module.
///
/// The transition block and the 1×1 projection are applied to both views, so
/// query and key come from the same map and the score matrix transposes when
/// the views are swapped. The fusion conv maps `[features, warped, mask]`
/// (2C+1 channels) back to C and is likewise shared.
#[derive(Debug, Clone, PartialEq)]
pub struct PamParams {
    pub transition: ResBlockParams,
    pub projection: Conv,
    pub fuse: Conv,
    pub channels: usize,
}

impl PamParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, channels: usize) -> Self {
        Self {
            transition: ResBlockParams::new(init, &format!("{name}.transition"), channels),
            projection: Conv::new(init, &format!("{name}.projection"), channels, channels, 1, 1),
            fuse: Conv::new(init, &format!("{name}.fuse"), 2 * channels + 1, channels, 1, 1),
            channels,
        }
    }
}

/// Attention products of one PAM evaluation, recorded on a tape.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    pub scores: Var,
    /// B×H×W×W; row `i` distributes left column `i` over right columns.
    pub m_r2l: Var,
    pub m_l2r: Var,
    /// `m_r2l · m_l2r` per row slice.
    pub cycle_l: Var,
    /// `m_l2r · m_r2l` per row slice.
    pub cycle_r: Var,
    /// B×1×H×W binary masks (gradient constants).
    pub v_left: Tensor<T>,
    pub v_right: Tensor<T>,
    pub tau: f64,
}

pub struct PamOutput<T> {
    pub left: Var,
    pub right: Var,
    pub maps: AttentionMaps<T>,
}

/// Cross-view scores B×H×W×W: entry (b,h,i,j) matches left column `i` with
/// right column `j` on row `h`.
pub fn pam_scores<T: Real>(tape: &mut Tape<T>, p: &Bound, pam: &PamParams, f_left: Var, f_right: Var) -> Result<Var> {
    if tape.value(f_left).shape() != tape.value(f_right).shape() {
        return Err(invalid!(
            "PAM inputs differ in shape: {:?} vs {:?}",
            tape.value(f_left).shape(),
            tape.value(f_right).shape()
        ));
    }
    let bl = res_block(tape, p, &pam.transition, f_left)?;
    let br = res_block(tape, p, &pam.transition, f_right)?;
    let q = pam.projection.apply(tape, p, bl)?;
    let k = pam.projection.apply(tape, p, br)?;
    tape.batched_width_scores(q, k)
}

/// Both attention maps from raw scores. The transpose is taken before the
/// softmax so that both maps are row-stochastic.
pub fn attention_from_scores<T: Real>(tape: &mut Tape<T>, scores: Var) -> Result<(Var, Var)> {
    let m_r2l = tape.softmax_last_axis(scores)?;
    let t = tape.transpose_last_two(scores)?;
    let m_l2r = tape.softmax_last_axis(t)?;
    Ok((m_r2l, m_l2r))
}

pub fn cycle_maps<T: Real>(tape: &mut Tape<T>, m_r2l: Var, m_l2r: Var) -> Result<(Var, Var)> {
    let cycle_l = tape.bmm(m_r2l, m_l2r)?;
    let cycle_r = tape.bmm(m_l2r, m_r2l)?;
    Ok((cycle_l, cycle_r))
}

/// Column-sum occlusion test: V(b,0,h,j) = 1 iff Σ_k m(b,h,k,j) > τ.
pub fn valid_mask<T: Real>(m: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(invalid!("valid-mask threshold must be positive, got {}", tau));
    }
    let (b, h, wi, wj) = m.dims4()?;
    let md = m.data();
    let thr = T::of(tau);
    let mut out = Tensor::zeros(&[b, 1, h, wj]);
    let od = out.data_mut();
    for bi in 0..b {
        for hi in 0..h {
            let slice = &md[(bi * h + hi) * wi * wj..][..wi * wj];
            let dst = &mut od[(bi * h + hi) * wj..][..wj];
            let mut sums = alloc::vec![T::zero(); wj];
            for row in slice.chunks(wj) {
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s = *s + v;
                }
            }
            for (d, s) in dst.iter_mut().zip(sums) {
                *d = if s > thr { T::one() } else { T::zero() };
            }
        }
    }
    Ok(out)
}

/// Full module: scores once, both maps, both warps, both masks, and fused per-view features.
pub fn pam_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    pam: &PamParams,
    f_left: Var,
    f_right: Var,
    tau: f64,
) -> Result<PamOutput<T>> {
    let scores = pam_scores(tape, p, pam, f_left, f_right)?;
    let (m_r2l, m_l2r) = attention_from_scores(tape, scores)?;
    let (cycle_l, cycle_r) = cycle_maps(tape, m_r2l, m_l2r)?;
    let v_left = valid_mask(tape.value(m_r2l), tau)?;
    let v_right = valid_mask(tape.value(m_l2r), tau)?;
    let one = T::one();
    tape.note_discrete(v_left.data().iter().chain(v_right.data()).map(|&v| v == one));

    let warped_right = tape.warp(m_r2l, f_right)?;
    let warped_left = tape.warp(m_l2r, f_left)?;
    let vl = tape.constant(v_left.clone());
    let vr = tape.constant(v_right.clone());
    let cat_l = tape.concat(&[f_left, warped_right, vl], 1)?;
    let cat_r = tape.concat(&[f_right, warped_left, vr], 1)?;
    let left = pam.fuse.apply(tape, p, cat_l)?;
    let right = pam.fuse.apply(tape, p, cat_r)?;
    Ok(PamOutput {
        left,
        right,
        maps: AttentionMaps {
            scores,
            m_r2l,
            m_l2r,
            cycle_l,
            cycle_r,
            v_left,
            v_right,
            tau,
        },
    })
}
