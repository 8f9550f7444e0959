//! Finite-difference gradient suite over every block and the full model,
//! in 64-bit floats with extents of at most 8.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    aspp_group, ccsb, channel_attention, feature_extractor, res_aspp_block, res_block, spatial_attention,
    AsppGroupParams, CabParams, CcsbParams, ExtractorParams, ResAsppBlockParams, ResBlockParams, SabParams,
};
use crate::error::{invalid, Result};
use crate::gradcheck::{check_gradients, random_projection, CheckOptions, GradReport};
use crate::loss::{compute_loss, LossWeights};
use crate::model::{upsampler, Model, ModelConfig};
use crate::pam::{attention_from_scores, pam_forward, pam_scores, PamParams, DEFAULT_TAU};
use crate::params::{Bound, ParamInit, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SUITE_BLOCKS: [&str; 14] = [
    "cab",
    "sab",
    "ccsb",
    "aspp_group",
    "res_aspp_block",
    "res_block",
    "feature_extractor",
    "pam_scores",
    "pam_softmax",
    "pam_warp",
    "pam_fusion",
    "upsampler",
    "full_model",
    "total_loss",
];

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Elements probed per input tensor.
    pub max_per_input: usize,
    /// Operation whose adjoint is corrupted (negative control).
    pub fault: Option<&'static str>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_per_input: 16,
            fault: None,
        }
    }
}

/// Model used by the model-level checks.
pub fn suite_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        scale: 2,
        channels: 4,
        reduction: 2,
        aspp_groups: 2,
        extraction_pairs: 1,
        upsampler_ccsbs: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn rand(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn check_opts(o: &SuiteOptions) -> CheckOptions {
    CheckOptions {
        max_per_input: Some(o.max_per_input),
        seed: o.seed,
        fault: o.fault,
        ..CheckOptions::default()
    }
}

/// `inputs` followed by every tensor of `store`; `f` gets the leading input
/// variables and the bound parameters.
fn with_params<F>(name: &str, o: &SuiteOptions, inputs: Vec<Tensor<f64>>, store: &ParamStore<f64>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var], &Bound) -> Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs;
    all.extend(store.tensors().iter().cloned());
    let seed = o.seed;
    check_gradients(name, &all, check_opts(o), |t, v| {
        let p = Bound::from_vars(v[n..].to_vec());
        let y = f(t, &v[..n], &p)?;
        if t.value(y).numel() == 1 {
            Ok(y)
        } else {
            random_projection(t, y, seed ^ 0xa5)
        }
    })
}

fn build<P>(seed: u64, f: impl FnOnce(&mut ParamInit<f64>) -> Result<P>) -> Result<(ParamStore<f64>, P)> {
    let mut init = ParamInit::new(seed);
    let p = f(&mut init)?;
    Ok((init.finish(), p))
}

pub fn run_block(name: &str, o: &SuiteOptions) -> Result<GradReport> {
    let s = o.seed;
    let feat = |k: u64| rand(&[1, 4, 6, 6], s.wrapping_add(k), -1.0, 1.0);
    match name {
        "cab" => {
            let (st, p) = build(s, |i| CabParams::new(i, "cab", 4, 2))?;
            with_params(name, o, alloc::vec![feat(1)], &st, |t, v, b| channel_attention(t, b, &p, v[0]))
        }
        "sab" => {
            let (st, p) = build(s, |i| Ok(SabParams::new(i, "sab")))?;
            with_params(name, o, alloc::vec![feat(2)], &st, |t, v, b| spatial_attention(t, b, &p, v[0]))
        }
        "ccsb" => {
            let (st, p) = build(s, |i| CcsbParams::new(i, "ccsb", 4, 2))?;
            with_params(name, o, alloc::vec![feat(3)], &st, |t, v, b| ccsb(t, b, &p, v[0]))
        }
        "aspp_group" => {
            let (st, p) = build(s, |i| Ok(AsppGroupParams::new(i, "aspp", 4)))?;
            with_params(name, o, alloc::vec![feat(4)], &st, |t, v, b| aspp_group(t, b, &p, v[0]))
        }
        "res_aspp_block" => {
            let (st, p) = build(s, |i| Ok(ResAsppBlockParams::new(i, "raspp", 4, 3)))?;
            with_params(name, o, alloc::vec![feat(5)], &st, |t, v, b| res_aspp_block(t, b, &p, v[0]))
        }
        "res_block" => {
            let (st, p) = build(s, |i| Ok(ResBlockParams::new(i, "res", 4)))?;
            with_params(name, o, alloc::vec![feat(6)], &st, |t, v, b| res_block(t, b, &p, v[0]))
        }
        "feature_extractor" => {
            let (st, p) = build(s, |i| ExtractorParams::new(i, "fe", 4, 2, 2, 1))?;
            let img = rand(&[1, 3, 8, 8], s.wrapping_add(7), 0.0, 1.0);
            with_params(name, o, alloc::vec![img], &st, |t, v, b| feature_extractor(t, b, &p, v[0]))
        }
        "pam_scores" => {
            let (st, p) = build(s, |i| Ok(PamParams::new(i, "pam", 4)))?;
            with_params(name, o, alloc::vec![feat(8), feat(9)], &st, |t, v, b| pam_scores(t, b, &p, v[0], v[1]))
        }
        "pam_softmax" => {
            let scores = rand(&[1, 4, 6, 6], s.wrapping_add(10), -3.0, 3.0);
            with_params(name, o, alloc::vec![scores], &ParamStore::new(), |t, v, _| {
                let (a, b) = attention_from_scores(t, v[0])?;
                t.concat(&[a, b], 1)
            })
        }
        "pam_warp" => {
            let scores = rand(&[1, 6, 6, 6], s.wrapping_add(11), -3.0, 3.0);
            with_params(name, o, alloc::vec![scores, feat(12)], &ParamStore::new(), |t, v, _| {
                let m = t.softmax_last_axis(v[0])?;
                t.warp(m, v[1])
            })
        }
        "pam_fusion" => {
            let (st, p) = build(s, |i| Ok(PamParams::new(i, "pam", 4)))?;
            with_params(name, o, alloc::vec![feat(13), feat(14)], &st, |t, v, b| {
                let out = pam_forward(t, b, &p, v[0], v[1], DEFAULT_TAU)?;
                t.concat(&[out.left, out.right], 1)
            })
        }
        "upsampler" => {
            let m = Model::<f64>::new(suite_model_config(s))?;
            let f = rand(&[1, 4, 4, 4], s.wrapping_add(15), -1.0, 1.0);
            with_params(name, o, alloc::vec![f], &m.params, |t, v, b| upsampler(t, b, &m.layout.upsampler, v[0]))
        }
        "full_model" => {
            let m = Model::<f64>::new(suite_model_config(s))?;
            let l = rand(&[1, 3, 8, 8], s.wrapping_add(16), 0.0, 1.0);
            let r = rand(&[1, 3, 8, 8], s.wrapping_add(17), 0.0, 1.0);
            with_params(name, o, alloc::vec![l, r], &m.params, |t, v, b| {
                let out = m.forward(t, b, v[0], v[1])?;
                t.concat(&[out.sr_left, out.sr_right], 1)
            })
        }
        "total_loss" => {
            let m = Model::<f64>::new(suite_model_config(s))?;
            let l = rand(&[1, 3, 8, 8], s.wrapping_add(18), 0.0, 1.0);
            let r = rand(&[1, 3, 8, 8], s.wrapping_add(19), 0.0, 1.0);
            let hl = rand(&[1, 3, 16, 16], s.wrapping_add(20), 0.0, 1.0);
            let hr = rand(&[1, 3, 16, 16], s.wrapping_add(21), 0.0, 1.0);
            with_params(name, o, alloc::vec![l, r], &m.params, |t, v, b| {
                let out = m.forward(t, b, v[0], v[1])?;
                let hl = t.constant(hl.clone());
                let hr = t.constant(hr.clone());
                let (total, _) = compute_loss(
                    t,
                    out.sr_left,
                    out.sr_right,
                    &out.maps,
                    v[0],
                    v[1],
                    hl,
                    hr,
                    &LossWeights::default(),
                )?;
                Ok(total)
            })
        }
        other => Err(invalid!("unknown gradcheck block {:?}", other)),
    }
}

/// Runs every entry of [`SUITE_BLOCKS`] in order.
pub fn run_suite(o: &SuiteOptions) -> Result<Vec<GradReport>> {
    SUITE_BLOCKS.iter().map(|b| run_block(b, o)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_block_is_an_error() {
        assert!(run_block("nope", &SuiteOptions::default()).is_err());
    }

    #[test]
    fn softmax_check_catches_corrupted_adjoint() {
        let good = run_block("pam_softmax", &SuiteOptions::default()).unwrap();
        assert!(good.passed(), "{good:?}");
        let bad = run_block(
            "pam_softmax",
            &SuiteOptions {
                fault: Some("softmax_last_axis"),
                ..SuiteOptions::default()
            },
        )
        .unwrap();
        assert!(!bad.passed());
    }
}
