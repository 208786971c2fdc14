//! Declarative layer descriptors and the mutable per-layer state that
//! carries parameters, accumulated gradients, and the forward cache.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kaf::{self, AlphaInit, KafKind, KafParams};
use crate::ops;
use crate::tensor::Tensor;

/// Choice of nonlinearity for a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Kaf,
    Kaf2d,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Relu, Activation::Kaf, Activation::Kaf2d];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Kaf => "kaf",
            Activation::Kaf2d => "kaf2d",
        }
    }

    /// Output channel count for `channels` inputs.
    pub fn output_channels(self, channels: usize) -> usize {
        match self {
            Activation::Kaf2d => channels / 2,
            _ => channels,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown activation '{s}' (valid: relu, kaf, kaf2d)")))
    }
}

/// How KAF coefficients start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaInitKind {
    /// Normal, mean 0, std [`kaf::ALPHA_INIT_STD`].
    Random,
    /// Ridge fit to ELU on the dictionary (1-D only; 2-D falls back to random).
    Elu,
}

/// Dictionary and initialization settings shared by every KAF layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KafConfig {
    /// Dictionary size `D`.
    pub size: usize,
    /// Dictionary spans `[−bound, bound]`.
    pub bound: f64,
    /// Overrides the spacing-derived bandwidth when set.
    pub gamma: Option<f64>,
    pub per_channel: bool,
    pub init: AlphaInitKind,
}

impl Default for KafConfig {
    fn default() -> Self {
        Self {
            size: 20,
            bound: 3.0,
            gamma: None,
            per_channel: true,
            init: AlphaInitKind::Random,
        }
    }
}

impl KafConfig {
    pub fn dictionary(&self) -> Result<kaf::Dictionary> {
        let mut dict = kaf::make_dictionary(self.size, self.bound)?;
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Parameter(format!("kernel bandwidth must be positive, got {g}")));
            }
            dict.gamma = g;
        }
        Ok(dict)
    }
}

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { window: usize },
    Linear { inputs: usize, outputs: usize },
    Relu,
    /// 1-D KAF over `channels` inputs.
    Kaf { channels: usize },
    /// 2-D KAF over `channels` inputs (must be even), producing `channels / 2`.
    Kaf2d { channels: usize },
    Flatten,
}

impl LayerSpec {
    pub fn activation(act: Activation, channels: usize) -> LayerSpec {
        match act {
            Activation::Relu => LayerSpec::Relu,
            Activation::Kaf => LayerSpec::Kaf { channels },
            Activation::Kaf2d => LayerSpec::Kaf2d { channels },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Kaf { .. } => "kaf",
            LayerSpec::Kaf2d { .. } => "kaf2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output shape (without the batch axis) for an input of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |msg: String| Err(Error::Dimension(format!("{}: {msg}", self.name())));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [c, h, w] = input else {
                    return fail(format!("expected [C, H, W], got {input:?}"));
                };
                if *c != in_channels {
                    return fail(format!("axis 1 (channels): expected {in_channels}, got {c}"));
                }
                if kernel == 0 || stride == 0 || *h < kernel || *w < kernel {
                    return fail(format!("kernel {kernel} / stride {stride} do not fit {h}×{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::MaxPool2d { window } => {
                let [c, h, w] = input else {
                    return fail(format!("expected [C, H, W], got {input:?}"));
                };
                if window == 0 || h % window != 0 || w % window != 0 {
                    return fail(format!("{h}×{w} not divisible by window {window}"));
                }
                Ok(vec![*c, h / window, w / window])
            }
            LayerSpec::Linear { inputs, outputs } => {
                if input != [inputs] {
                    return fail(format!("expected [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Kaf { channels } => {
                if input.first() != Some(&channels) {
                    return fail(format!("expected {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Kaf2d { channels } => {
                if input.first() != Some(&channels) {
                    return fail(format!("expected {channels} channels, got {input:?}"));
                }
                if channels % 2 != 0 {
                    return fail(format!("channel count {channels} is odd"));
                }
                let mut out = input.to_vec();
                out[0] = channels / 2;
                Ok(out)
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerParams {
    None,
    Affine { weight: Tensor, bias: Tensor },
    Kaf(KafParams),
}

impl LayerParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Affine { weight, bias } => vec![weight, bias],
            LayerParams::Kaf(p) => vec![p.alpha()],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Affine { weight, bias } => vec![weight, bias],
            LayerParams::Kaf(p) => vec![p.alpha_mut()],
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
}

/// Parameters, gradients, and forward cache of one layer.
#[derive(Debug, Clone)]
pub struct LayerState {
    spec: LayerSpec,
    params: LayerParams,
    grads: Vec<Tensor>,
    cache: Option<Cache>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 0.0, (2.0 / fan_in as f64).sqrt(), rng)
}

impl LayerState {
    /// Fresh layer: He-normal weights, zero biases, KAF coefficients per `kaf_cfg`.
    pub fn init(spec: LayerSpec, kaf_cfg: &KafConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerParams::Affine {
                weight: he_normal(
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    rng,
                ),
                bias: Tensor::zeros(&[out_channels]),
            },
            LayerSpec::Linear { inputs, outputs } => LayerParams::Affine {
                weight: he_normal(&[inputs, outputs], inputs, rng),
                bias: Tensor::zeros(&[outputs]),
            },
            LayerSpec::Kaf { channels } => {
                let dict = kaf_cfg.dictionary()?;
                let mut p = KafParams::zeros(KafKind::OneD, &dict, channels, kaf_cfg.per_channel)?;
                let alpha = match kaf_cfg.init {
                    AlphaInitKind::Elu => kaf::init_alpha(&p, AlphaInit::FitTarget(&kaf::elu), rng)?,
                    AlphaInitKind::Random => kaf::init_alpha(&p, AlphaInit::Random { std: kaf::ALPHA_INIT_STD }, rng)?,
                };
                p.set_alpha(alpha)?;
                LayerParams::Kaf(p)
            }
            LayerSpec::Kaf2d { channels } => {
                if channels % 2 != 0 {
                    return Err(Error::Dimension(format!("kaf2d channel count {channels} is odd")));
                }
                let dict = kaf_cfg.dictionary()?;
                let mut p = KafParams::zeros(KafKind::TwoD, &dict, channels / 2, kaf_cfg.per_channel)?;
                let alpha = kaf::init_alpha(&p, AlphaInit::Random { std: kaf::ALPHA_INIT_STD }, rng)?;
                p.set_alpha(alpha)?;
                LayerParams::Kaf(p)
            }
            LayerSpec::MaxPool2d { .. } | LayerSpec::Relu | LayerSpec::Flatten => LayerParams::None,
        };
        Self::with_params(spec, params)
    }

    /// Layer with explicit parameters, checked against the descriptor.
    pub fn with_params(spec: LayerSpec, params: LayerParams) -> Result<Self> {
        let ok = match (&spec, &params) {
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                },
                LayerParams::Affine { weight, bias },
            ) => weight.shape() == [*out_channels, *in_channels, *kernel, *kernel] && bias.shape() == [*out_channels],
            (LayerSpec::Linear { inputs, outputs }, LayerParams::Affine { weight, bias }) => {
                weight.shape() == [*inputs, *outputs] && bias.shape() == [*outputs]
            }
            (LayerSpec::Kaf { channels }, LayerParams::Kaf(p)) => {
                p.kind() == KafKind::OneD && (!p.per_channel() || p.alpha().shape()[0] == *channels)
            }
            (LayerSpec::Kaf2d { channels }, LayerParams::Kaf(p)) => {
                p.kind() == KafKind::TwoD && (!p.per_channel() || p.alpha().shape()[0] * 2 == *channels)
            }
            (LayerSpec::MaxPool2d { .. } | LayerSpec::Relu | LayerSpec::Flatten, LayerParams::None) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Dimension(format!(
                "parameters do not match {} layer {spec:?}",
                spec.name()
            )));
        }
        let grads = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            spec,
            params,
            grads,
            cache: None,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    /// Parameters paired with their gradients.
    pub fn param_grad_pairs(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.params.tensors_mut().into_iter().zip(self.grads.iter())
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    /// Forward pass without touching the cache.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.spec, &self.params) {
            (LayerSpec::Conv2d { stride, .. }, LayerParams::Affine { weight, bias }) => {
                ops::conv2d(x, weight, bias, *stride)
            }
            (LayerSpec::Linear { .. }, LayerParams::Affine { weight, bias }) => ops::linear(x, weight, bias),
            (LayerSpec::MaxPool2d { window }, _) => Ok(ops::maxpool2d(x, *window)?.output),
            (LayerSpec::Relu, _) => Ok(ops::relu(x)),
            (LayerSpec::Kaf { .. }, LayerParams::Kaf(p)) => kaf::kaf_forward(x, p),
            (LayerSpec::Kaf2d { .. }, LayerParams::Kaf(p)) => kaf::kaf2d_forward(x, p),
            (LayerSpec::Flatten, _) => flatten(x),
            _ => Err(Error::State(format!("inconsistent {} layer", self.spec.name()))),
        }
    }

    /// Forward pass that records what [`LayerState::backward`] needs.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, cache) = match &self.spec {
            LayerSpec::MaxPool2d { window } => {
                let pooled = ops::maxpool2d(x, *window)?;
                (
                    pooled.output,
                    Cache::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax: pooled.argmax,
                    },
                )
            }
            LayerSpec::Flatten => (flatten(x)?, Cache::Shape(x.shape().to_vec())),
            _ => (self.infer(x)?, Cache::Input(x.clone())),
        };
        out.check_finite(self.spec.name())?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the layer input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} backward called without a forward pass", self.spec.name())))?;
        let grad_input = match (&self.spec, &self.params, cache) {
            (LayerSpec::Conv2d { stride, .. }, LayerParams::Affine { weight, bias }, Cache::Input(x)) => {
                let g = ops::conv2d_backward(x, weight, bias, *stride, upstream)?;
                self.grads[0].add_scaled(&g.weight, 1.0)?;
                self.grads[1].add_scaled(&g.bias, 1.0)?;
                g.input
            }
            (LayerSpec::Linear { .. }, LayerParams::Affine { weight, bias }, Cache::Input(x)) => {
                let g = ops::linear_backward(x, weight, bias, upstream)?;
                self.grads[0].add_scaled(&g.weight, 1.0)?;
                self.grads[1].add_scaled(&g.bias, 1.0)?;
                g.input
            }
            (LayerSpec::MaxPool2d { .. }, _, Cache::Pool { input_shape, argmax }) => {
                ops::maxpool2d_backward(input_shape, argmax, upstream)?
            }
            (LayerSpec::Relu, _, Cache::Input(x)) => ops::relu_backward(x, upstream)?,
            (LayerSpec::Kaf { .. }, LayerParams::Kaf(p), Cache::Input(x)) => {
                let g = kaf::kaf_backward(x, upstream, p)?;
                self.grads[0].add_scaled(&g.alpha, 1.0)?;
                g.input
            }
            (LayerSpec::Kaf2d { .. }, LayerParams::Kaf(p), Cache::Input(x)) => {
                let g = kaf::kaf2d_backward(x, upstream, p)?;
                self.grads[0].add_scaled(&g.alpha, 1.0)?;
                g.input
            }
            (LayerSpec::Flatten, _, Cache::Shape(shape)) => upstream.clone().reshape(shape)?,
            _ => return Err(Error::State(format!("inconsistent {} layer cache", self.spec.name()))),
        };
        grad_input.check_finite(self.spec.name())?;
        Ok(grad_input)
    }
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    x.clone().reshape(&[n, x.item_len()])
}
