use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::blocks::{default_registry, BackboneRegistry, Block, BnMode, BnObserver, ForwardCtx};
use super::config::UNetConfig;
use crate::error::{ensure, Error, Result};
use crate::layers::{BatchNormState, LayerConfig};
use crate::numerics::{sigmoid, BatchMoments, Graph, Tensor, Var};

/// Block layout of a micro U-Net: `depth` encoder stages, a bottleneck,
/// `depth` decoder stages with concat skips, and a 1x1 logit head.
pub struct Network {
    encoder: Vec<Box<dyn Block>>,
    bottleneck: Box<dyn Block>,
    decoder: Vec<Box<dyn Block>>,
    head: LayerConfig,
    depth: usize,
}

impl Network {
    pub fn new(config: &UNetConfig, registry: &BackboneRegistry) -> Result<Self> {
        config.validate()?;
        let family = registry.for_variant(config.variant)?;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut channels = config.in_channels;
        for stage in 0..config.depth {
            let block = family.block(
                &format!("enc{stage}"),
                channels,
                config.width(stage),
                config,
            )?;
            channels = block.out_channels();
            encoder.push(block);
        }
        let bottleneck =
            family.block("bottleneck", channels, config.width(config.depth), config)?;
        channels = bottleneck.out_channels();
        let mut decoder = Vec::with_capacity(config.depth);
        for stage in (0..config.depth).rev() {
            let skip = encoder[stage].out_channels();
            let block = family.block(
                &format!("dec{stage}"),
                channels + skip,
                config.width(stage),
                config,
            )?;
            channels = block.out_channels();
            decoder.push(block);
        }
        let head = LayerConfig::conv1x1(channels, 1);
        let net = Self {
            encoder,
            bottleneck,
            decoder,
            head,
            depth: config.depth,
        };
        for (path, layer) in net.layers() {
            layer
                .validate()
                .map_err(|e| Error::contract("unet_build", format!("{path}: {e}")))?;
        }
        Ok(net)
    }

    pub fn layers(&self) -> Vec<(String, LayerConfig)> {
        let mut v: Vec<_> = self.encoder.iter().flat_map(|b| b.layers()).collect();
        v.extend(self.bottleneck.layers());
        v.extend(self.decoder.iter().flat_map(|b| b.layers()));
        v.push(("head".into(), self.head.clone()));
        v
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_, '_>, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for block in &self.encoder {
            let e = block.forward(ctx, h)?;
            skips.push(e);
            h = ctx.graph.maxpool2(e)?;
        }
        h = self.bottleneck.forward(ctx, h)?;
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = ctx.graph.upsample2(h)?;
            let joined = ctx.graph.concat_channels(up, skip)?;
            h = block.forward(ctx, joined)?;
        }
        ctx.conv("head", &self.head, h)
    }
}

/// A learnable tensor with its registry name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Decoupled weight decay applies (conv and linear weights only).
    pub decay: bool,
}

/// A built micro U-Net: configuration, parameters and batch-norm states.
#[derive(Clone)]
pub struct Model {
    config: UNetConfig,
    network: Arc<Network>,
    params: Vec<Param>,
    bn_paths: Vec<String>,
    bn: Vec<BatchNormState>,
}

/// Result of a value-level forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub bn: Vec<BatchNormState>,
    /// Batch moments per batch-norm layer (train and recompute modes only).
    pub moments: Vec<BatchMoments>,
}

/// Result of a forward pass recorded on a caller-owned graph.
pub struct GraphForward {
    pub logits: Var,
    pub bn: Vec<BatchNormState>,
    /// Leaves bound to [`Model::trainable`], in the same order.
    pub bindings: Vec<Var>,
}

fn is_decayed(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2")
}

impl Model {
    pub fn build(config: &UNetConfig) -> Result<Self> {
        Self::build_with(config, default_registry())
    }

    /// He-normal conv/linear weights, zero biases and betas, unit gammas, all
    /// drawn from a generator seeded by `config.seed`.
    pub fn build_with(config: &UNetConfig, registry: &BackboneRegistry) -> Result<Self> {
        let network = Network::new(config, registry)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut bn_paths = Vec::new();
        let mut bn = Vec::new();
        for (path, layer) in network.layers() {
            if let LayerConfig::Batchnorm { channels } = layer {
                bn_paths.push(path);
                bn.push(BatchNormState::with_hyper(
                    channels,
                    config.bn_eps,
                    config.bn_momentum,
                ));
                continue;
            }
            for (suffix, shape) in layer.param_shapes() {
                let name = format!("{path}.{suffix}");
                let numel: usize = shape.iter().product();
                let decay = is_decayed(&name);
                let data = if decay {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    vec![0.0; numel]
                };
                params.push(Param {
                    name,
                    value: Tensor::new(&shape, data)?,
                    decay,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            network: Arc::new(network),
            params,
            bn_paths,
            bn,
        })
    }

    /// Rebuilds a model from stored tensors, checking them against the layout
    /// implied by `config`.
    pub fn from_parts(
        config: &UNetConfig,
        params: Vec<Tensor>,
        bn: Vec<BatchNormState>,
    ) -> Result<Self> {
        let mut model = Self::build(config)?;
        ensure!(
            params.len() == model.params.len(),
            "model_from_parts",
            "expected {} parameters, got {}",
            model.params.len(),
            params.len()
        );
        for (slot, value) in model.params.iter_mut().zip(params) {
            ensure!(
                slot.value.shape() == value.shape(),
                "model_from_parts",
                "{} expects shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            );
            slot.value = value;
        }
        model.set_bn_states(bn)?;
        Ok(model)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<(String, LayerConfig)> {
        self.network.layers()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::contract("set_param", format!("no parameter {name}")))?;
        ensure!(
            slot.value.shape() == value.shape(),
            "set_param",
            "shape mismatch for {name}"
        );
        slot.value = value;
        Ok(())
    }

    pub fn bn_paths(&self) -> &[String] {
        &self.bn_paths
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn set_bn_states(&mut self, bn: Vec<BatchNormState>) -> Result<()> {
        ensure!(
            bn.len() == self.bn.len(),
            "set_bn_states",
            "expected {} batch-norm states, got {}",
            self.bn.len(),
            bn.len()
        );
        for (i, (new, old)) in bn.iter().zip(&self.bn).enumerate() {
            new.validate()?;
            ensure!(
                new.channels == old.channels,
                "set_bn_states",
                "layer {} expects {} channels, got {}",
                self.bn_paths[i],
                old.channels,
                new.channels
            );
        }
        self.bn = bn;
        Ok(())
    }

    pub fn with_bn_states(&self, bn: Vec<BatchNormState>) -> Result<Self> {
        let mut m = self.clone();
        m.set_bn_states(bn)?;
        Ok(m)
    }

    /// Learnable tensors: registry parameters, then gamma and beta of every
    /// batch-norm layer.
    pub fn trainable(&self) -> Vec<Param> {
        let mut v = self.params.clone();
        for (path, s) in self.bn_paths.iter().zip(&self.bn) {
            v.push(Param {
                name: format!("{path}.gamma"),
                value: s.gamma_tensor(),
                decay: false,
            });
            v.push(Param {
                name: format!("{path}.beta"),
                value: s.beta_tensor(),
                decay: false,
            });
        }
        v
    }

    /// Inverse of [`Model::trainable`].
    pub fn set_trainable(&mut self, values: Vec<Tensor>) -> Result<()> {
        let expected = self.params.len() + 2 * self.bn.len();
        ensure!(
            values.len() == expected,
            "set_trainable",
            "expected {expected} tensors, got {}",
            values.len()
        );
        let mut it = values.into_iter();
        for p in &mut self.params {
            let v = it.next().expect("length checked");
            ensure!(
                v.shape() == p.value.shape(),
                "set_trainable",
                "shape mismatch for {}",
                p.name
            );
            p.value = v;
        }
        for s in &mut self.bn {
            let gamma = it.next().expect("length checked");
            let beta = it.next().expect("length checked");
            ensure!(
                gamma.numel() == s.channels && beta.numel() == s.channels,
                "set_trainable",
                "gamma/beta length mismatch"
            );
            s.gamma = gamma.into_vec();
            s.beta = beta.into_vec();
        }
        Ok(())
    }

    /// Number of learnable scalars (batch-norm gamma/beta included, running
    /// statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum::<usize>()
            + self.bn.iter().map(|s| 2 * s.channels).sum::<usize>()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        const OP: &str = "unet_forward";
        ensure!(shape.len() == 4, OP, "expected NCHW input, got {shape:?}");
        ensure!(
            shape[1] == self.config.in_channels,
            OP,
            "input has {} channels, model expects {}",
            shape[1],
            self.config.in_channels
        );
        let m = 1usize << self.config.depth;
        ensure!(
            shape[2].is_multiple_of(m) && shape[3].is_multiple_of(m),
            OP,
            "spatial extents {}x{} must be divisible by {m}",
            shape[2],
            shape[3]
        );
        Ok(())
    }

    /// Records a forward pass on `g`. With `trainable` set, every learnable
    /// tensor is bound as a differentiable leaf.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        x: Var,
        mode: BnMode,
        trainable: bool,
        observer: Option<BnObserver<'_>>,
    ) -> Result<GraphForward> {
        let bind = |g: &mut Graph, t: Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let bindings: Vec<Var> = self
            .trainable()
            .into_iter()
            .map(|p| bind(g, p.value))
            .collect();
        self.forward_bound(g, x, bindings, mode, observer)
    }

    /// Records a forward pass whose learnable tensors are the caller's
    /// `bindings`, given in [`Model::trainable`] order.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        x: Var,
        bindings: Vec<Var>,
        mode: BnMode,
        observer: Option<BnObserver<'_>>,
    ) -> Result<GraphForward> {
        self.check_input(g.shape(x))?;
        let expected = self.params.len() + 2 * self.bn.len();
        ensure!(
            bindings.len() == expected,
            "unet_forward",
            "expected {expected} bindings, got {}",
            bindings.len()
        );
        let params: BTreeMap<String, Var> = self
            .params
            .iter()
            .zip(&bindings)
            .map(|(p, &v)| (p.name.clone(), v))
            .collect();
        let bn_vars: Vec<(Var, Var)> = bindings[self.params.len()..]
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect();
        let mut ctx = ForwardCtx {
            graph: g,
            params: &params,
            bn_paths: &self.bn_paths,
            bn: &self.bn,
            bn_vars: &bn_vars,
            mode,
            next_bn: 0,
            updated: self.bn.clone(),
            moments: Vec::new(),
            observer,
        };
        let logits = self.network.forward(&mut ctx, x)?;
        ensure!(
            ctx.next_bn == self.bn.len(),
            "unet_forward",
            "visited {} of {} batch-norm layers",
            ctx.next_bn,
            self.bn.len()
        );
        Ok(GraphForward {
            logits,
            bn: ctx.updated,
            bindings,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<ForwardOutput> {
        self.forward_observed(x, mode, None)
    }

    pub fn forward_observed(
        &self,
        x: &Tensor,
        mode: BnMode,
        observer: Option<BnObserver<'_>>,
    ) -> Result<ForwardOutput> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let params = self
            .params
            .iter()
            .map(|p| (p.name.clone(), g.constant(p.value.clone())))
            .collect();
        let bn_vars: Vec<_> = self
            .bn
            .iter()
            .map(|s| (g.constant(s.gamma_tensor()), g.constant(s.beta_tensor())))
            .collect();
        let mut ctx = ForwardCtx {
            graph: &mut g,
            params: &params,
            bn_paths: &self.bn_paths,
            bn: &self.bn,
            bn_vars: &bn_vars,
            mode,
            next_bn: 0,
            updated: self.bn.clone(),
            moments: Vec::new(),
            observer,
        };
        let logits = self.network.forward(&mut ctx, xv)?;
        let (bn, moments) = (ctx.updated, ctx.moments);
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            bn,
            moments,
        })
    }

    /// Eval-mode sigmoid probabilities, shape `[N, 1, H, W]`.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.forward(x, BnMode::Eval)?.logits;
        let probs: Vec<f64> = logits.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(logits.shape(), probs)
    }

    /// Bitwise equality of configuration, parameters and batch-norm states.
    pub fn bit_eq(&self, other: &Model) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
            && self.bn_paths == other.bn_paths
            && self.bn.iter().zip(&other.bn).all(|(a, b)| {
                bits(&a.running_mean) == bits(&b.running_mean)
                    && bits(&a.running_var) == bits(&b.running_var)
                    && bits(&a.gamma) == bits(&b.gamma)
                    && bits(&a.beta) == bits(&b.beta)
                    && a.eps.to_bits() == b.eps.to_bits()
                    && a.momentum.to_bits() == b.momentum.to_bits()
            })
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("bn_layers", &self.bn_paths)
            .finish()
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.bn_paths == other.bn_paths
            && self.bn == other.bn
    }
}
