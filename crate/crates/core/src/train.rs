//! Optimization steps and evaluation over stereo samples.

use alloc::vec::Vec;

use crate::adam::{AdamConfig, AdamState};
use crate::data::StereoSample;
use crate::error::{invalid, Result};
use crate::loss::{compute_loss, LossBreakdown, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Four B×3×H×W tensors stacked from samples of equal extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub lr_left: Tensor<f32>,
    pub lr_right: Tensor<f32>,
    pub hr_left: Tensor<f32>,
    pub hr_right: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&StereoSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let pick = |f: fn(&StereoSample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let items: Vec<&Tensor<f32>> = samples.iter().map(|s| f(s)).collect();
            Tensor::stack(&items)
        };
        Ok(Self {
            lr_left: pick(|s| &s.lr_left)?,
            lr_right: pick(|s| &s.lr_right)?,
            hr_left: pick(|s| &s.hr_left)?,
            hr_right: pick(|s| &s.hr_right)?,
        })
    }
}

pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(model: Model<f32>, adam: AdamConfig, weights: LossWeights) -> Self {
        let adam = AdamState::new(adam, model.params.tensors());
        Self { model, adam, weights }
    }

    /// Loss terms for `batch` without updating anything.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.model.params.bind_frozen(&mut tape);
        Ok(self.record(&mut tape, &p, batch)?.1)
    }

    fn record(&self, tape: &mut Tape<f32>, p: &crate::params::Bound, batch: &Batch) -> Result<(crate::tape::Var, LossBreakdown)> {
        let ll = tape.constant(batch.lr_left.clone());
        let lr = tape.constant(batch.lr_right.clone());
        let hl = tape.constant(batch.hr_left.clone());
        let hr = tape.constant(batch.hr_right.clone());
        let out = self.model.forward(tape, p, ll, lr)?;
        compute_loss(tape, out.sr_left, out.sr_right, &out.maps, ll, lr, hl, hr, &self.weights)
    }

    /// Forward, loss, backward, and one Adam update. Returns the loss terms
    /// measured before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let (total, breakdown) = self.record(&mut tape, &p, batch)?;
        if !breakdown.total.is_finite() {
            return Err(invalid!("non-finite loss at step {}", self.adam.step_count() + 1));
        }
        tape.backward(total)?;
        let grads = self.model.params.grads(&tape, &p);
        drop(tape);
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        let mut params: Vec<&mut Tensor<f32>> = self.model.params.tensors_mut().iter_mut().collect();
        self.adam.step(&mut params, &grad_refs)?;
        Ok(breakdown)
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step_count()
    }
}

/// PSNR and SSIM (unit peak) of one view pair, averaged over both views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

/// Averages PSNR over both views. SSIM is only defined on images at least as
/// large as its window, so smaller images report `NaN`.
pub fn quality(sr: (&Tensor<f32>, &Tensor<f32>), hr: (&Tensor<f32>, &Tensor<f32>)) -> Result<Quality> {
    let p = (psnr(sr.0, hr.0, 1.0)? + psnr(sr.1, hr.1, 1.0)?) / 2.0;
    let s = match (ssim(sr.0, hr.0, 1.0), ssim(sr.1, hr.1, 1.0)) {
        (Ok(a), Ok(b)) => (a + b) / 2.0,
        _ => f64::NAN,
    };
    Ok(Quality { psnr: p, ssim: s })
}

/// Model and bicubic quality on one sample.
pub fn evaluate_sample(model: &Model<f32>, sample: &StereoSample) -> Result<(Quality, Quality)> {
    let l = Tensor::stack(&[&sample.lr_left])?;
    let r = Tensor::stack(&[&sample.lr_right])?;
    let (sl, sr) = model.infer(&l, &r)?;
    let sl = sl.index_first(0)?;
    let sr = sr.index_first(0)?;
    let (bl, br) = sample.bicubic_baseline()?;
    let hr = (&sample.hr_left, &sample.hr_right);
    Ok((quality((&sl, &sr), hr)?, quality((&bl.clamp(0.0, 1.0), &br.clamp(0.0, 1.0)), hr)?))
}
