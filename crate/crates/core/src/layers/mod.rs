//! Neural layers on top of the tape: batch normalisation with explicit
//! running statistics, and squeeze-excitation gating.

mod batchnorm;
mod se;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use batchnorm::{
    batchnorm_eval, batchnorm_train, BatchNormState, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
pub use se::{se_gate, SeWeights};

/// Declarative description of one layer and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    },
    Batchnorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    Maxpool2,
    Upsample2,
    ConcatSkip,
    SeGate {
        channels: usize,
        se_reduction: usize,
    },
    GlobalAvg,
}

impl LayerConfig {
    pub fn conv3x3(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        LayerConfig::Conv {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups,
            bias: false,
        }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        LayerConfig::Conv {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "layer_config";
        match *self {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                groups,
                ..
            } => {
                ensure!(
                    in_channels > 0 && out_channels > 0,
                    OP,
                    "conv channel counts must be positive"
                );
                ensure!(
                    kernel > 0 && stride > 0,
                    OP,
                    "conv kernel and stride must be positive"
                );
                ensure!(
                    groups > 0 && in_channels % groups == 0 && out_channels % groups == 0,
                    OP,
                    "groups {groups} must divide {in_channels} and {out_channels}"
                );
            }
            LayerConfig::Batchnorm { channels } => {
                ensure!(channels > 0, OP, "batchnorm needs channels")
            }
            LayerConfig::SeGate {
                channels,
                se_reduction,
            } => ensure!(
                se_reduction > 0 && channels % se_reduction == 0,
                OP,
                "se_reduction {se_reduction} must divide {channels} channels"
            ),
            _ => {}
        }
        Ok(())
    }

    /// Shapes of the learnable tensors, in declaration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                groups,
                bias,
                ..
            } => {
                let mut v = vec![(
                    "w",
                    vec![out_channels, in_channels / groups, kernel, kernel],
                )];
                if bias {
                    v.push(("b", vec![out_channels]));
                }
                v
            }
            LayerConfig::Batchnorm { channels } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerConfig::SeGate {
                channels,
                se_reduction,
            } => {
                let hidden = channels / se_reduction;
                vec![
                    ("w1", vec![hidden, channels]),
                    ("b1", vec![hidden]),
                    ("w2", vec![channels, hidden]),
                    ("b2", vec![channels]),
                ]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
