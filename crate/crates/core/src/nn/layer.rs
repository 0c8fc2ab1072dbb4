use super::Activation;
use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;
use serde::{Deserialize, Serialize};

/// One layer of a [`Network`](super::Network). Shapes are per sample; the
/// batch axis is implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = x·W + b`, with `W` stored `[inputs, outputs]`.
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    /// Cross-correlation with `[out_ch, in_ch, k, k]` kernels plus a bias per
    /// output channel. Output extents use floor division.
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x,
    Reshape {
        target: Vec<usize>,
    },
    BatchNorm {
        features: usize,
    },
    Activation(Activation),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Upsample2x => "upsample",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Activation(_) => "act",
        }
    }

    /// Per-sample output dims for per-sample input `dims`.
    pub fn output_dims(&self, dims: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::dim(format!("{} layer cannot take per-sample input {dims:?}", self.kind()));
        match self {
            LayerSpec::FullyConnected { inputs, outputs } => {
                if dims != [*inputs] {
                    return Err(mismatch());
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                k,
                stride,
                pad,
            } => {
                if dims.len() != 3 || dims[0] != *in_ch {
                    return Err(mismatch());
                }
                let oh = conv_output_extent(dims[1], *k, *stride, *pad, false)?;
                let ow = conv_output_extent(dims[2], *k, *stride, *pad, false)?;
                Ok(vec![*out_ch, oh, ow])
            }
            LayerSpec::Upsample2x => {
                if dims.len() != 3 {
                    return Err(mismatch());
                }
                Ok(vec![dims[0], 2 * dims[1], 2 * dims[2]])
            }
            LayerSpec::Reshape { target } => {
                if target.is_empty()
                    || target.contains(&0)
                    || target.iter().product::<usize>() != dims.iter().product::<usize>()
                {
                    return Err(mismatch());
                }
                Ok(target.clone())
            }
            LayerSpec::BatchNorm { features } => {
                if !(dims.len() == 1 || dims.len() == 3) || dims[0] != *features {
                    return Err(mismatch());
                }
                Ok(dims.to_vec())
            }
            LayerSpec::Activation(a) => {
                a.validate()?;
                Ok(dims.to_vec())
            }
        }
    }

    /// Shapes of the trainable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::FullyConnected { inputs, outputs } => {
                vec![vec![*inputs, *outputs], vec![*outputs]]
            }
            LayerSpec::Conv { in_ch, out_ch, k, .. } => vec![vec![*out_ch, *in_ch, *k, *k], vec![*out_ch]],
            LayerSpec::BatchNorm { features } => vec![vec![*features], vec![*features]],
            _ => Vec::new(),
        }
    }
}
