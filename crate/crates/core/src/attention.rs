//! Spatial attention blocks.
//!
//! `l2_sab` computes sigmoid(conv_KxK(l2(channel_max(F)) - l2(channel_min(F))))
//! and gates every channel of F with the resulting (B,1,H,W) map. Because
//! both branch maps are l2-normalized per sample, the map is invariant to
//! positive rescaling of the input (whenever both branch norms clear the
//! epsilon guard).
//!
//! `cbam_spatial` is the original comparison block: channel max and mean
//! maps concatenated to 2 channels, a KxK conv down to 1 channel, sigmoid,
//! gate. It is not scale-invariant.
//!
//! Each block exists in two forms: an eager function over plain tensors and
//! a tape-recorded form used inside models. Both compose the same kernels.

use crate::error::{Error, Result};
use crate::ops::{self, ReduceMode};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Which attention block, if any, follows a backbone convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    L2Sab,
    CbamSpatial,
    None,
}

/// Per-block settings for the l2-normalized spatial attention block.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct L2SabConfig {
    /// Side length of the single-channel square convolution.
    pub kernel: usize,
    /// Guard for the per-sample l2 normalization denominator.
    pub epsilon: f64,
}

impl Default for L2SabConfig {
    fn default() -> Self {
        L2SabConfig { kernel: 7, epsilon: 1e-12 }
    }
}

impl L2SabConfig {
    pub fn with_kernel(kernel: usize) -> Self {
        L2SabConfig { kernel, ..Default::default() }
    }

    fn conv_spec(&self) -> ConvSpec {
        ConvSpec::same(1, 1, self.kernel)
    }

    /// Expected weight shape: one output channel over the difference map.
    pub fn weight_shape(&self) -> [usize; 4] {
        [1, 1, self.kernel, self.kernel]
    }
}

fn check_attention_weights<T: Scalar>(
    op: &'static str,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    in_channels: usize,
    kernel: usize,
) -> Result<()> {
    let want = [1, in_channels, kernel, kernel];
    if weight.shape() != want {
        return Err(Error::shape(
            op,
            "conv weight shape",
            format!("{want:?}"),
            format!("{:?}", weight.shape()),
        ));
    }
    if bias.shape() != [1] {
        return Err(Error::shape(op, "conv bias shape", "[1]", format!("{:?}", bias.shape())));
    }
    Ok(())
}

/// Attention map of the l2-normalized block: (B,1,H,W), values in (0,1).
pub fn l2_sab_attention<T: Scalar>(
    f: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cfg: &L2SabConfig,
) -> Result<Tensor<T>> {
    check_attention_weights("l2_sab_attention", weight, bias, 1, cfg.kernel)?;
    let max_map = ops::channel_reduce(f, ReduceMode::Max)?;
    let min_map = ops::channel_reduce(f, ReduceMode::Min)?;
    let max_n = ops::l2_normalize_per_sample(&max_map, cfg.epsilon)?;
    let min_n = ops::l2_normalize_per_sample(&min_map, cfg.epsilon)?;
    let diff = ops::sub(&max_n, &min_n)?;
    let conv = ops::conv2d(&diff, weight, bias, &cfg.conv_spec())?;
    Ok(ops::sigmoid(&conv))
}

/// Gate every channel of `f` by the l2-SAB attention map.
pub fn l2_sab_forward<T: Scalar>(
    f: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    cfg: &L2SabConfig,
) -> Result<Tensor<T>> {
    let map = l2_sab_attention(f, weight, bias, cfg)?;
    ops::gate_channels(&map, f)
}

/// Attention map of the original CBAM spatial block: channel max and mean
/// concatenated, KxK conv from 2 channels to 1, sigmoid.
pub fn cbam_spatial_attention<T: Scalar>(
    f: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
) -> Result<Tensor<T>> {
    check_attention_weights("cbam_spatial_attention", weight, bias, 2, kernel)?;
    let max_map = ops::channel_reduce(f, ReduceMode::Max)?;
    let mean_map = ops::channel_reduce(f, ReduceMode::Mean)?;
    let stacked = ops::concat_channels(&max_map, &mean_map)?;
    let conv = ops::conv2d(&stacked, weight, bias, &ConvSpec::same(2, 1, kernel))?;
    Ok(ops::sigmoid(&conv))
}

pub fn cbam_spatial_forward<T: Scalar>(
    f: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
) -> Result<Tensor<T>> {
    let map = cbam_spatial_attention(f, weight, bias, kernel)?;
    ops::gate_channels(&map, f)
}

/// Tape-recorded l2-SAB attention map.
pub fn l2_sab_attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    weight: NodeId,
    bias: NodeId,
    cfg: &L2SabConfig,
) -> Result<NodeId> {
    check_attention_weights("l2_sab_attention", tape.value(weight), tape.value(bias), 1, cfg.kernel)?;
    let max_map = tape.channel_reduce(f, ReduceMode::Max)?;
    let min_map = tape.channel_reduce(f, ReduceMode::Min)?;
    let max_n = tape.l2_normalize(max_map, cfg.epsilon)?;
    let min_n = tape.l2_normalize(min_map, cfg.epsilon)?;
    let diff = tape.sub(max_n, min_n)?;
    let conv = tape.conv2d(diff, weight, bias, &cfg.conv_spec())?;
    Ok(tape.sigmoid(conv))
}

pub fn l2_sab_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    weight: NodeId,
    bias: NodeId,
    cfg: &L2SabConfig,
) -> Result<NodeId> {
    let map = l2_sab_attention_tape(tape, f, weight, bias, cfg)?;
    tape.gate_channels(map, f)
}

/// Tape-recorded CBAM spatial attention map.
pub fn cbam_spatial_attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    weight: NodeId,
    bias: NodeId,
    kernel: usize,
) -> Result<NodeId> {
    check_attention_weights("cbam_spatial_attention", tape.value(weight), tape.value(bias), 2, kernel)?;
    let max_map = tape.channel_reduce(f, ReduceMode::Max)?;
    let mean_map = tape.channel_reduce(f, ReduceMode::Mean)?;
    let stacked = tape.concat_channels(max_map, mean_map)?;
    let conv = tape.conv2d(stacked, weight, bias, &ConvSpec::same(2, 1, kernel))?;
    Ok(tape.sigmoid(conv))
}

pub fn cbam_spatial_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    weight: NodeId,
    bias: NodeId,
    kernel: usize,
) -> Result<NodeId> {
    let map = cbam_spatial_attention_tape(tape, f, weight, bias, kernel)?;
    tape.gate_channels(map, f)
}
