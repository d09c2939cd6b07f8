use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::layers::{DEFAULT_EPS, DEFAULT_MOMENTUM};

/// Encoder/decoder block family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    /// Two conv-BN stages with an identity or projection skip.
    Residual,
    /// Residual block with a squeeze-excitation gate before the skip-add.
    SqueezeExcite,
    /// Squeeze-excite block whose second convolution is grouped.
    GroupedSe,
    /// Split output: a residual-add part plus a dense part that is concatenated.
    DualPath,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 4] = [
        Self::Residual,
        Self::SqueezeExcite,
        Self::GroupedSe,
        Self::DualPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Residual => "residual",
            Self::SqueezeExcite => "squeeze-excite",
            Self::GroupedSe => "grouped-se",
            Self::DualPath => "dual-path",
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::contract("backbone_variant", format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up stages.
    pub depth: usize,
    pub variant: BackboneVariant,
    pub se_reduction: usize,
    /// Groups of the second convolution (grouped-se only).
    pub groups: usize,
    /// Channels appended per block by the dense path (dual-path only).
    pub dual_path_dense: usize,
    pub seed: u64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 8,
            depth: 3,
            variant: BackboneVariant::Residual,
            se_reduction: 4,
            groups: 2,
            dual_path_dense: 4,
            seed: 0,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl UNetConfig {
    pub fn micro(variant: BackboneVariant, depth: usize, base_channels: usize, seed: u64) -> Self {
        Self {
            variant,
            depth,
            base_channels,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "unet_config";
        ensure!(
            self.depth >= 1,
            OP,
            "depth must be at least 1, got {}",
            self.depth
        );
        ensure!(self.in_channels >= 1, OP, "in_channels must be positive");
        ensure!(self.se_reduction >= 1, OP, "se_reduction must be positive");
        ensure!(
            self.base_channels >= self.se_reduction,
            OP,
            "base_channels {} must be at least se_reduction {}",
            self.base_channels,
            self.se_reduction
        );
        if matches!(
            self.variant,
            BackboneVariant::SqueezeExcite | BackboneVariant::GroupedSe
        ) {
            ensure!(
                self.base_channels.is_multiple_of(self.se_reduction),
                OP,
                "se_reduction {} must divide base_channels {}",
                self.se_reduction,
                self.base_channels
            );
        }
        if self.variant == BackboneVariant::GroupedSe {
            ensure!(
                self.groups >= 1 && self.base_channels.is_multiple_of(self.groups),
                OP,
                "groups {} must divide base_channels {}",
                self.groups,
                self.base_channels
            );
        }
        if self.variant == BackboneVariant::DualPath {
            ensure!(
                self.dual_path_dense >= 1,
                OP,
                "dual_path_dense must be positive"
            );
        }
        ensure!(self.bn_eps > 0.0, OP, "bn_eps must be positive");
        ensure!(
            self.bn_momentum > 0.0 && self.bn_momentum <= 1.0,
            OP,
            "bn_momentum must lie in (0, 1]"
        );
        Ok(())
    }

    /// Channel width of encoder stage `stage` (the bottleneck is `depth`).
    pub fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}
