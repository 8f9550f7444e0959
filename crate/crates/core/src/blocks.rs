//! Feature-extraction building blocks: channel attention, spatial attention,
//! their combination, residual ASPP, residual blocks, and the shared extractor.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::params::{Bound, ParamId, ParamInit};
use crate::real::Real;
use crate::tape::{PoolMode, Tape, Var};

/// Negative slope of every leaky-ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Dilation rates of the three parallel branches of an ASPP group.
pub const ASPP_DILATIONS: [usize; 3] = [1, 4, 8];

/// Square convolution with stride 1 and same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, c_in: usize, c_out: usize, k: usize, dilation: usize) -> Self {
        Self {
            weight: init.weight(&format!("{name}.weight"), &[c_out, c_in, k, k]),
            bias: init.bias(&format!("{name}.bias"), c_out),
            dilation,
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d_same(x, p.var(self.weight), p.var(self.bias), self.dilation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            weight: init.weight(&format!("{name}.weight"), &[n_out, n_in]),
            bias: init.bias(&format!("{name}.bias"), n_out),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Channel attention: shared bottleneck MLP `C → C/r → C` over the average-
/// and max-pooled descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct CabParams {
    pub fc1: Dense,
    pub fc2: Dense,
    pub channels: usize,
    pub reduction: usize,
}

impl CabParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(invalid!("reduction {} must divide channel count {}", reduction, channels));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Dense::new(init, &format!("{name}.fc1"), channels, hidden),
            fc2: Dense::new(init, &format!("{name}.fc2"), hidden, channels),
            channels,
            reduction,
        })
    }
}

/// Spatial attention: one 3×3 convolution over the [max, mean] channel-pooled map.
#[derive(Debug, Clone, PartialEq)]
pub struct SabParams {
    pub conv: Conv,
}

impl SabParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str) -> Self {
        Self {
            conv: Conv::new(init, &format!("{name}.conv"), 2, 1, 3, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcsbParams {
    pub cab: CabParams,
    pub sab: SabParams,
}

impl CcsbParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            cab: CabParams::new(init, &format!("{name}.cab"), channels, reduction)?,
            sab: SabParams::new(init, &format!("{name}.sab")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsppGroupParams {
    pub branches: Vec<Conv>,
    pub fuse: Conv,
}

impl AsppGroupParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, channels: usize) -> Self {
        let branches = ASPP_DILATIONS
            .iter()
            .map(|&d| Conv::new(init, &format!("{name}.d{d}"), channels, channels, 3, d))
            .collect();
        let fuse = Conv::new(init, &format!("{name}.fuse"), 3 * channels, channels, 1, 1);
        Self { branches, fuse }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResAsppBlockParams {
    pub groups: Vec<AsppGroupParams>,
}

impl ResAsppBlockParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            groups: (0..groups)
                .map(|g| AsppGroupParams::new(init, &format!("{name}.group{g}"), channels))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlockParams {
    pub fn new<T: Real>(init: &mut ParamInit<T>, name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv::new(init, &format!("{name}.conv1"), channels, channels, 3, 1),
            conv2: Conv::new(init, &format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }
}

/// Shared per-view feature extractor: stem conv, CCSB, then alternating
/// residual-ASPP and residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub stem: Conv,
    pub ccsb: CcsbParams,
    pub stages: Vec<(ResAsppBlockParams, ResBlockParams)>,
    pub channels: usize,
}

impl ExtractorParams {
    pub fn new<T: Real>(
        init: &mut ParamInit<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        aspp_groups: usize,
        pairs: usize,
    ) -> Result<Self> {
        let stem = Conv::new(init, &format!("{name}.stem"), 3, channels, 3, 1);
        let ccsb = CcsbParams::new(init, &format!("{name}.ccsb"), channels, reduction)?;
        let stages = (0..pairs)
            .map(|i| {
                (
                    ResAsppBlockParams::new(init, &format!("{name}.stage{i}.aspp"), channels, aspp_groups),
                    ResBlockParams::new(init, &format!("{name}.stage{i}.res"), channels),
                )
            })
            .collect();
        Ok(Self {
            stem,
            ccsb,
            stages,
            channels,
        })
    }
}

// ------------------------------------------------------------- forward

/// Channel gate `sigmoid(MLP(avg) + MLP(max))`, shape B×C×1×1.
pub fn channel_gate<T: Real>(tape: &mut Tape<T>, p: &Bound, cab: &CabParams, x: Var) -> Result<Var> {
    let (b, c, _, _) = tape.value(x).dims4()?;
    if c != cab.channels {
        return Err(invalid!("channel attention built for {} channels, got {}", cab.channels, c));
    }
    let mut logits = None;
    for mode in [PoolMode::Mean, PoolMode::Max] {
        let pooled = tape.global_pool_spatial(x, mode)?;
        let flat = tape.reshape(pooled, &[b, c])?;
        let hidden = cab.fc1.apply(tape, p, flat)?;
        let hidden = tape.relu(hidden)?;
        let out = cab.fc2.apply(tape, p, hidden)?;
        logits = Some(match logits {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let logits = logits.expect("two pooled paths");
    let gate = tape.sigmoid(logits)?;
    tape.reshape(gate, &[b, c, 1, 1])
}

pub fn channel_attention<T: Real>(tape: &mut Tape<T>, p: &Bound, cab: &CabParams, x: Var) -> Result<Var> {
    let gate = channel_gate(tape, p, cab, x)?;
    tape.mul(x, gate)
}

/// Spatial map `sigmoid(conv3×3([max_c, mean_c]))`, shape B×1×H×W.
pub fn spatial_map<T: Real>(tape: &mut Tape<T>, p: &Bound, sab: &SabParams, x: Var) -> Result<Var> {
    let mx = tape.pool_across_channels(x, PoolMode::Max)?;
    let mn = tape.pool_across_channels(x, PoolMode::Mean)?;
    let pooled = tape.concat(&[mx, mn], 1)?;
    let logits = sab.conv.apply(tape, p, pooled)?;
    tape.sigmoid(logits)
}

pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, p: &Bound, sab: &SabParams, x: Var) -> Result<Var> {
    let map = spatial_map(tape, p, sab, x)?;
    tape.mul(x, map)
}

/// Channel attention followed by spatial attention.
pub fn ccsb<T: Real>(tape: &mut Tape<T>, p: &Bound, block: &CcsbParams, x: Var) -> Result<Var> {
    let x = channel_attention(tape, p, &block.cab, x)?;
    spatial_attention(tape, p, &block.sab, x)
}

/// Three parallel dilated convs with leaky-ReLU, concat, 1×1 fusion, plus `x`.
pub fn aspp_group<T: Real>(tape: &mut Tape<T>, p: &Bound, group: &AsppGroupParams, x: Var) -> Result<Var> {
    let mut branches = Vec::with_capacity(group.branches.len());
    for conv in &group.branches {
        let y = conv.apply(tape, p, x)?;
        branches.push(tape.leaky_relu(y, LEAKY_SLOPE)?);
    }
    let cat = tape.concat(&branches, 1)?;
    let fused = group.fuse.apply(tape, p, cat)?;
    tape.add(x, fused)
}

/// Cascade of residual ASPP groups.
///
/// Each group carries its own identity path, so the cascade output is `x`
/// plus the sum of every group's residual branch; that sum is the block's
/// outer residual connection.
pub fn res_aspp_block<T: Real>(tape: &mut Tape<T>, p: &Bound, block: &ResAsppBlockParams, x: Var) -> Result<Var> {
    let mut y = x;
    for g in &block.groups {
        y = aspp_group(tape, p, g, y)?;
    }
    Ok(y)
}

/// `x + conv(lrelu(conv(x)))`.
pub fn res_block<T: Real>(tape: &mut Tape<T>, p: &Bound, block: &ResBlockParams, x: Var) -> Result<Var> {
    let y = block.conv1.apply(tape, p, x)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
    let y = block.conv2.apply(tape, p, y)?;
    tape.add(x, y)
}

/// B×3×H×W image → B×C×H×W features. The same parameters serve both views.
pub fn feature_extractor<T: Real>(tape: &mut Tape<T>, p: &Bound, ex: &ExtractorParams, image: Var) -> Result<Var> {
    let (_, c, _, _) = tape.value(image).dims4()?;
    if c != 3 {
        return Err(invalid!("feature extractor expects 3 input channels, got {}", c));
    }
    let x = ex.stem.apply(tape, p, image)?;
    let mut x = ccsb(tape, p, &ex.ccsb, x)?;
    for (aspp, res) in &ex.stages {
        x = res_aspp_block(tape, p, aspp, x)?;
        x = res_block(tape, p, res, x)?;
    }
    Ok(x)
}
