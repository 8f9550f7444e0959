//! The full network: shared extractor, parallax attention, shared upsampler.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::blocks::{ccsb, feature_extractor, CcsbParams, Conv, ExtractorParams};
use crate::error::{invalid, Result};
use crate::pam::{pam_forward, AttentionMaps, PamParams, DEFAULT_TAU};
use crate::params::{Bound, ParamInit, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest LR height or width accepted by [`Model::forward`].
pub const MIN_EXTENT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: usize,
    pub channels: usize,
    pub reduction: usize,
    pub tau: f64,
    pub aspp_groups: usize,
    pub extraction_pairs: usize,
    pub upsampler_ccsbs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            channels: 64,
            reduction: 16,
            tau: DEFAULT_TAU,
            aspp_groups: 3,
            extraction_pairs: 2,
            upsampler_ccsbs: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 8] = [
        "scale",
        "channels",
        "reduction",
        "tau",
        "aspp_groups",
        "extraction_pairs",
        "upsampler_ccsbs",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(invalid!("scale must be 2 or 4, got {}", self.scale));
        }
        if self.channels == 0 || self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(invalid!(
                "reduction {} must divide channels {}",
                self.reduction,
                self.channels
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid!("tau must be positive and finite, got {}", self.tau));
        }
        for (name, v) in [
            ("aspp_groups", self.aspp_groups),
            ("extraction_pairs", self.extraction_pairs),
            ("upsampler_ccsbs", self.upsampler_ccsbs),
        ] {
            if v == 0 {
                return Err(invalid!("{} must be at least 1", name));
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model keys so callers can layer their own keys on top.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| invalid!("bad value for {}: {:?}", key, value))
        }
        match key {
            "scale" => self.scale = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "reduction" => self.reduction = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "aspp_groups" => self.aspp_groups = num(key, value)?,
            "extraction_pairs" => self.extraction_pairs = num(key, value)?,
            "upsampler_ccsbs" => self.upsampler_ccsbs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines, one per field, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scale = {}", self.scale);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "reduction = {}", self.reduction);
        let _ = writeln!(s, "tau = {:?}", self.tau);
        let _ = writeln!(s, "aspp_groups = {}", self.aspp_groups);
        let _ = writeln!(s, "extraction_pairs = {}", self.extraction_pairs);
        let _ = writeln!(s, "upsampler_ccsbs = {}", self.upsampler_ccsbs);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored,
    /// unknown keys are errors. The result is validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            if !cfg.set(key, value)? {
                return Err(invalid!("unknown model config key {:?}", key));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits flat `key = value` text into trimmed pairs, skipping blanks and
/// `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid!("line {}: expected `key = value`, got {:?}", n + 1, raw))?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerParams {
    pub ccsbs: Vec<CcsbParams>,
    /// One C→4C conv per ×2 pixel-shuffle stage.
    pub stages: Vec<Conv>,
    pub out: Conv,
    pub scale: usize,
}

impl UpsamplerParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let ccsbs = (0..cfg.upsampler_ccsbs)
            .map(|i| CcsbParams::new(init, &format!("{name}.ccsb{i}"), c, cfg.reduction))
            .collect::<Result<Vec<_>>>()?;
        let n_stages = match cfg.scale {
            2 => 1,
            4 => 2,
            s => return Err(invalid!("unsupported scale {}", s)),
        };
        let stages = (0..n_stages)
            .map(|i| Conv::new(init, &format!("{name}.shuffle{i}"), c, 4 * c, 3, 1))
            .collect();
        let out = Conv::new(init, &format!("{name}.out"), c, 3, 3, 1);
        Ok(Self {
            ccsbs,
            stages,
            out,
            scale: cfg.scale,
        })
    }
}

/// B×C×H×W features → B×3×sH×sW image (unclamped).
pub fn upsampler<T: Real>(tape: &mut Tape<T>, p: &Bound, up: &UpsamplerParams, f: Var) -> Result<Var> {
    let mut x = f;
    for block in &up.ccsbs {
        x = ccsb(tape, p, block, x)?;
    }
    for conv in &up.stages {
        let y = conv.apply(tape, p, x)?;
        x = tape.pixel_shuffle(y, 2)?;
    }
    up.out.apply(tape, p, x)
}

/// Parameter layout of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub extractor: ExtractorParams,
    pub pam: PamParams,
    pub upsampler: UpsamplerParams,
}

impl Layout {
    pub fn new<T: Real>(init: &mut ParamInit<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            extractor: ExtractorParams::new(
                init,
                "extractor",
                cfg.channels,
                cfg.reduction,
                cfg.aspp_groups,
                cfg.extraction_pairs,
            )?,
            pam: PamParams::new(init, "pam", cfg.channels),
            upsampler: UpsamplerParams::new(init, "upsampler", cfg)?,
        })
    }
}

pub struct ModelOutput<T> {
    pub sr_left: Var,
    pub sr_right: Var,
    pub maps: AttentionMaps<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Xavier-initialized weights drawn from `config.seed`, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut init = ParamInit::new(config.seed);
        let layout = Layout::new(&mut init, &config)?;
        Ok(Self {
            config,
            layout,
            params: init.finish(),
        })
    }

    /// Adopts externally supplied parameters after checking that names and
    /// shapes agree with the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.len() != params.len() {
            return Err(invalid!(
                "parameter count {} does not match the configured model ({})",
                params.len(),
                fresh.params.len()
            ));
        }
        for ((en, et), (gn, gt)) in fresh.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(invalid!(
                    "parameter {:?} {:?} does not match expected {:?} {:?}",
                    gn,
                    gt.shape(),
                    en,
                    et.shape()
                ));
            }
        }
        Ok(Self {
            config: fresh.config,
            layout: fresh.layout,
            params,
        })
    }

    /// Forward pass on a tape with parameters `p` (from `self.params` or a
    /// cast of it). Inputs are B×3×H×W with H, W ≥ [`MIN_EXTENT`].
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, left: Var, right: Var) -> Result<ModelOutput<T>> {
        let shape = tape.value(left).shape().to_vec();
        if shape != tape.value(right).shape() {
            return Err(invalid!(
                "left {:?} and right {:?} views differ in shape",
                shape,
                tape.value(right).shape()
            ));
        }
        let (_, _, h, w) = tape.value(left).dims4()?;
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(invalid!("input extents {}×{} below the minimum of {}", h, w, MIN_EXTENT));
        }
        let fl = feature_extractor(tape, p, &self.layout.extractor, left)?;
        let fr = feature_extractor(tape, p, &self.layout.extractor, right)?;
        let pam = pam_forward(tape, p, &self.layout.pam, fl, fr, self.config.tau)?;
        let sr_left = upsampler(tape, p, &self.layout.upsampler, pam.left)?;
        let sr_right = upsampler(tape, p, &self.layout.upsampler, pam.right)?;
        Ok(ModelOutput {
            sr_left,
            sr_right,
            maps: pam.maps,
        })
    }

    /// Gradient-free forward with outputs clamped to [0, 1].
    pub fn infer(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let l = tape.constant(left.clone());
        let r = tape.constant(right.clone());
        let out = self.forward(&mut tape, &p, l, r)?;
        let (zero, one) = (T::zero(), T::one());
        Ok((
            tape.value(out.sr_left).clamp(zero, one),
            tape.value(out.sr_right).clamp(zero, one),
        ))
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}
