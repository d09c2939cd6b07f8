//! Backbone block strategies and the registry that selects them by name.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use super::config::{BackboneVariant, UNetConfig};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_eval, batchnorm_train, se_gate, BatchNormState, LayerConfig, SeWeights,
};
use crate::numerics::{BatchMoments, Graph, Tensor, Var};

/// How batch-norm layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch moments, running statistics blended with the layer momentum.
    Train,
    /// Stored running statistics; no cross-sample coupling.
    Eval,
    /// Batch moments, running statistics replaced by them.
    Recompute,
}

/// Observer of every batch-norm input, called with the layer index.
pub type BnObserver<'a> = &'a mut dyn FnMut(usize, &Tensor);

/// Per-forward state handed to blocks.
pub struct ForwardCtx<'a, 'o> {
    pub graph: &'a mut Graph,
    pub(crate) params: &'a BTreeMap<String, Var>,
    pub(crate) bn_paths: &'a [String],
    pub(crate) bn: &'a [BatchNormState],
    pub(crate) bn_vars: &'a [(Var, Var)],
    pub(crate) mode: BnMode,
    pub(crate) next_bn: usize,
    pub(crate) updated: Vec<BatchNormState>,
    pub(crate) moments: Vec<BatchMoments>,
    pub(crate) observer: Option<BnObserver<'o>>,
}

impl ForwardCtx<'_, '_> {
    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("forward", format!("missing parameter {name}")))
    }

    pub fn conv(&mut self, path: &str, layer: &LayerConfig, x: Var) -> Result<Var> {
        let LayerConfig::Conv {
            stride,
            pad,
            groups,
            bias,
            ..
        } = *layer
        else {
            return Err(Error::contract(
                "forward",
                format!("{path} is not a convolution"),
            ));
        };
        let w = self.param(&format!("{path}.w"))?;
        let b = if bias {
            Some(self.param(&format!("{path}.b"))?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, stride, pad, groups)
    }

    pub fn se(&mut self, path: &str, reduction: usize, x: Var) -> Result<Var> {
        let weights = SeWeights {
            w1: self.param(&format!("{path}.w1"))?,
            b1: self.param(&format!("{path}.b1"))?,
            w2: self.param(&format!("{path}.w2"))?,
            b2: self.param(&format!("{path}.b2"))?,
        };
        se_gate(self.graph, x, &weights, reduction)
    }

    /// Applies the next batch-norm layer, which must be registered at `path`.
    pub fn batchnorm(&mut self, path: &str, x: Var) -> Result<Var> {
        let i = self.next_bn;
        match self.bn_paths.get(i) {
            Some(p) if p == path => {}
            other => {
                return Err(Error::contract(
                    "forward",
                    format!("batch-norm layer {i} expected at {other:?}, reached {path}"),
                ))
            }
        }
        self.next_bn += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs(i, self.graph.value(x));
        }
        let state = &self.bn[i];
        let (gamma, beta) = self.bn_vars[i];
        match self.mode {
            BnMode::Eval => batchnorm_eval(self.graph, x, state, gamma, beta),
            BnMode::Train | BnMode::Recompute => {
                let (y, blended, moments) = batchnorm_train(self.graph, x, state, gamma, beta)?;
                self.updated[i] = if self.mode == BnMode::Train {
                    blended
                } else {
                    state.with_statistics(moments.mean.clone(), moments.var.clone())
                };
                self.moments.push(moments);
                Ok(y)
            }
        }
    }
}

/// One encoder/decoder block.
pub trait Block: Send + Sync {
    fn out_channels(&self) -> usize;

    /// Parameter-carrying layers with their full paths, in forward order.
    fn layers(&self) -> Vec<(String, LayerConfig)>;

    fn forward(&self, ctx: &mut ForwardCtx<'_, '_>, x: Var) -> Result<Var>;
}

/// Strategy that constructs the blocks of one backbone variant.
pub trait BackboneFamily: Send + Sync {
    fn variant(&self) -> BackboneVariant;

    fn summary(&self) -> &'static str;

    fn block(
        &self,
        path: &str,
        in_channels: usize,
        width: usize,
        cfg: &UNetConfig,
    ) -> Result<Box<dyn Block>>;
}

/// conv3x3-BN-relu, conv3x3-BN, optional SE gate, skip-add, relu.
struct ResidualBlock {
    path: String,
    in_channels: usize,
    width: usize,
    second_groups: usize,
    se_reduction: Option<usize>,
}

impl ResidualBlock {
    fn conv1(&self) -> LayerConfig {
        LayerConfig::conv3x3(self.in_channels, self.width, 1)
    }

    fn conv2(&self) -> LayerConfig {
        LayerConfig::conv3x3(self.width, self.width, self.second_groups)
    }

    fn proj(&self) -> Option<LayerConfig> {
        (self.in_channels != self.width).then(|| LayerConfig::conv1x1(self.in_channels, self.width))
    }
}

impl Block for ResidualBlock {
    fn out_channels(&self) -> usize {
        self.width
    }

    fn layers(&self) -> Vec<(String, LayerConfig)> {
        let p = &self.path;
        let mut v = vec![
            (format!("{p}.conv1"), self.conv1()),
            (
                format!("{p}.bn1"),
                LayerConfig::Batchnorm {
                    channels: self.width,
                },
            ),
            (format!("{p}.conv2"), self.conv2()),
            (
                format!("{p}.bn2"),
                LayerConfig::Batchnorm {
                    channels: self.width,
                },
            ),
        ];
        if let Some(r) = self.se_reduction {
            v.push((
                format!("{p}.se"),
                LayerConfig::SeGate {
                    channels: self.width,
                    se_reduction: r,
                },
            ));
        }
        if let Some(proj) = self.proj() {
            v.push((format!("{p}.proj"), proj));
        }
        v
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_, '_>, x: Var) -> Result<Var> {
        let p = &self.path;
        let h = ctx.conv(&format!("{p}.conv1"), &self.conv1(), x)?;
        let h = ctx.batchnorm(&format!("{p}.bn1"), h)?;
        let h = ctx.graph.relu(h)?;
        let h = ctx.conv(&format!("{p}.conv2"), &self.conv2(), h)?;
        let mut h = ctx.batchnorm(&format!("{p}.bn2"), h)?;
        if let Some(r) = self.se_reduction {
            h = ctx.se(&format!("{p}.se"), r, h)?;
        }
        let skip = match self.proj() {
            Some(proj) => ctx.conv(&format!("{p}.proj"), &proj, x)?,
            None => x,
        };
        let sum = ctx.graph.add(h, skip)?;
        ctx.graph.relu(sum)
    }
}

/// Trunk producing `width + dense` channels; the first `width` are added to
/// the skip, the remaining `dense` are concatenated onto the output.
struct DualPathBlock {
    path: String,
    in_channels: usize,
    width: usize,
    dense: usize,
}

impl DualPathBlock {
    fn conv1(&self) -> LayerConfig {
        LayerConfig::conv3x3(self.in_channels, self.width, 1)
    }

    fn conv2(&self) -> LayerConfig {
        LayerConfig::conv3x3(self.width, self.width + self.dense, 1)
    }

    fn proj(&self) -> Option<LayerConfig> {
        (self.in_channels != self.width).then(|| LayerConfig::conv1x1(self.in_channels, self.width))
    }
}

impl Block for DualPathBlock {
    fn out_channels(&self) -> usize {
        self.width + self.dense
    }

    fn layers(&self) -> Vec<(String, LayerConfig)> {
        let p = &self.path;
        let mut v = vec![
            (format!("{p}.conv1"), self.conv1()),
            (
                format!("{p}.bn1"),
                LayerConfig::Batchnorm {
                    channels: self.width,
                },
            ),
            (format!("{p}.conv2"), self.conv2()),
            (
                format!("{p}.bn2"),
                LayerConfig::Batchnorm {
                    channels: self.width + self.dense,
                },
            ),
        ];
        if let Some(proj) = self.proj() {
            v.push((format!("{p}.proj"), proj));
        }
        v
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_, '_>, x: Var) -> Result<Var> {
        let p = &self.path;
        let h = ctx.conv(&format!("{p}.conv1"), &self.conv1(), x)?;
        let h = ctx.batchnorm(&format!("{p}.bn1"), h)?;
        let h = ctx.graph.relu(h)?;
        let h = ctx.conv(&format!("{p}.conv2"), &self.conv2(), h)?;
        let h = ctx.batchnorm(&format!("{p}.bn2"), h)?;
        let residual = ctx.graph.slice_channels(h, 0, self.width)?;
        let dense = ctx.graph.slice_channels(h, self.width, self.dense)?;
        let skip = match self.proj() {
            Some(proj) => ctx.conv(&format!("{p}.proj"), &proj, x)?,
            None => x,
        };
        let residual = ctx.graph.add(residual, skip)?;
        let joined = ctx.graph.concat_channels(residual, dense)?;
        ctx.graph.relu(joined)
    }
}

struct ResidualFamily;
struct SqueezeExciteFamily;
struct GroupedSeFamily;
struct DualPathFamily;

impl BackboneFamily for ResidualFamily {
    fn variant(&self) -> BackboneVariant {
        BackboneVariant::Residual
    }

    fn summary(&self) -> &'static str {
        "conv-BN-relu x2 with identity/projection skip"
    }

    fn block(
        &self,
        path: &str,
        in_channels: usize,
        width: usize,
        _cfg: &UNetConfig,
    ) -> Result<Box<dyn Block>> {
        Ok(Box::new(ResidualBlock {
            path: path.into(),
            in_channels,
            width,
            second_groups: 1,
            se_reduction: None,
        }))
    }
}

impl BackboneFamily for SqueezeExciteFamily {
    fn variant(&self) -> BackboneVariant {
        BackboneVariant::SqueezeExcite
    }

    fn summary(&self) -> &'static str {
        "residual block with squeeze-excitation before the skip-add"
    }

    fn block(
        &self,
        path: &str,
        in_channels: usize,
        width: usize,
        cfg: &UNetConfig,
    ) -> Result<Box<dyn Block>> {
        Ok(Box::new(ResidualBlock {
            path: path.into(),
            in_channels,
            width,
            second_groups: 1,
            se_reduction: Some(cfg.se_reduction),
        }))
    }
}

impl BackboneFamily for GroupedSeFamily {
    fn variant(&self) -> BackboneVariant {
        BackboneVariant::GroupedSe
    }

    fn summary(&self) -> &'static str {
        "squeeze-excite block with a grouped second convolution"
    }

    fn block(
        &self,
        path: &str,
        in_channels: usize,
        width: usize,
        cfg: &UNetConfig,
    ) -> Result<Box<dyn Block>> {
        Ok(Box::new(ResidualBlock {
            path: path.into(),
            in_channels,
            width,
            second_groups: cfg.groups,
            se_reduction: Some(cfg.se_reduction),
        }))
    }
}

impl BackboneFamily for DualPathFamily {
    fn variant(&self) -> BackboneVariant {
        BackboneVariant::DualPath
    }

    fn summary(&self) -> &'static str {
        "residual-add path plus dense concatenated path"
    }

    fn block(
        &self,
        path: &str,
        in_channels: usize,
        width: usize,
        cfg: &UNetConfig,
    ) -> Result<Box<dyn Block>> {
        Ok(Box::new(DualPathBlock {
            path: path.into(),
            in_channels,
            width,
            dense: cfg.dual_path_dense,
        }))
    }
}

/// Backbone families addressable by variant name.
#[derive(Clone, Default)]
pub struct BackboneRegistry {
    families: BTreeMap<&'static str, Arc<dyn BackboneFamily>>,
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ResidualFamily));
        r.register(Arc::new(SqueezeExciteFamily));
        r.register(Arc::new(GroupedSeFamily));
        r.register(Arc::new(DualPathFamily));
        r
    }

    /// Registers a family under its variant name, replacing any previous one.
    pub fn register(&mut self, family: Arc<dyn BackboneFamily>) {
        self.families.insert(family.variant().name(), family);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn BackboneFamily>> {
        self.families.get(name)
    }

    pub fn for_variant(&self, variant: BackboneVariant) -> Result<&Arc<dyn BackboneFamily>> {
        self.get(variant.name()).ok_or_else(|| {
            Error::contract(
                "backbone_registry",
                format!("no family registered for {variant}"),
            )
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.families.keys().copied()
    }
}

pub fn default_registry() -> &'static BackboneRegistry {
    static REGISTRY: OnceLock<BackboneRegistry> = OnceLock::new();
    REGISTRY.get_or_init(BackboneRegistry::with_defaults)
}
