//! VGG-19 feature extractor as a chain of layers with named taps, plus
//! reverse accumulation of tap gradients back to the input pixels.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{self, Padding, PoolIndices, Shape, Tensor, TensorError};
use crate::weights::{ConvWeights, WeightStore};

/// Convolutions per block (blocks 1..=5).
const VGG19_BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];
pub const VGG19_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
pub const TINY_CHANNELS: [usize; 5] = [4, 8, 8, 8, 8];

pub const DEFAULT_CONTENT_TAP: &str = "relu4_2";
pub const DEFAULT_STYLE_TAPS: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];

#[derive(Debug, Error)]
pub enum NetError {
    #[error("weight store has no entry for layer `{0}`")]
    MissingWeight(String),
    #[error("layer `{layer}` expects kernel {expected}, weight store has {found}")]
    WeightShape {
        layer: String,
        expected: Shape,
        found: Shape,
    },
    #[error("`{0}` is not a layer of this network")]
    UnknownTap(String),
    #[error("input {input} is too small for layer `{layer}`")]
    ImageTooSmall { layer: String, input: Shape },
    #[error("network input must be 1x3xHxW, got {0}")]
    BadInput(Shape),
    #[error("gradient for tap `{tap}` has shape {found}, activation is {expected}")]
    GradShape {
        tap: String,
        expected: Shape,
        found: Shape,
    },
    #[error("activation cache was produced by a different network")]
    CacheMismatch,
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolingMode {
    #[default]
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { weights: ConvWeights },
    Relu,
    MaxPool { size: usize },
    AvgPool { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Maps the `convX_Y` spelling onto the rectified `reluX_Y` tap.
pub fn resolve_tap_name(name: &str) -> String {
    match name.strip_prefix("conv") {
        Some(rest) => format!("relu{rest}"),
        None => name.to_owned(),
    }
}

/// A simple chain of layers. Immutable once built; forward and backward
/// only read it.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    layers: Vec<LayerSpec>,
    taps: BTreeSet<String>,
}

impl NetworkGraph {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self {
            layers,
            taps: BTreeSet::new(),
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn taps(&self) -> &BTreeSet<String> {
        &self.taps
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn with_taps<I, S>(mut self, taps: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for tap in taps {
            let tap = tap.as_ref();
            if self.layer_index(tap).is_none() {
                return Err(NetError::UnknownTap(tap.to_owned()));
            }
            set.insert(tap.to_owned());
        }
        self.taps = set;
        Ok(self)
    }

    /// Drops every layer after the deepest tap.
    pub fn pruned(mut self) -> Self {
        if let Some(last) = self.taps.iter().filter_map(|t| self.layer_index(t)).max() {
            self.layers.truncate(last + 1);
        }
        self
    }

    pub fn forward(&self, image: &Tensor) -> Result<ActivationCache> {
        let shape = image.shape();
        if shape.n != 1 || shape.c != 3 {
            return Err(NetError::BadInput(shape));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut pool_indices = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().unwrap_or(image);
            let wrap = |source: TensorError| match source {
                TensorError::EmptyOutput { input, .. } => NetError::ImageTooSmall {
                    layer: layer.name.clone(),
                    input,
                },
                source => NetError::Layer {
                    layer: layer.name.clone(),
                    source,
                },
            };
            let (out, idx) = match &layer.kind {
                LayerKind::Conv { weights } => (
                    tensor::conv2d_forward(input, &weights.kernel, &weights.bias, Padding::Same, 1)
                        .map_err(wrap)?,
                    None,
                ),
                LayerKind::Relu => (tensor::relu_forward(input), None),
                LayerKind::MaxPool { size } => {
                    let (out, idx) = tensor::maxpool_forward(input, *size).map_err(wrap)?;
                    (out, Some(idx))
                }
                LayerKind::AvgPool { size } => (tensor::avgpool_forward(input, *size).map_err(wrap)?, None),
            };
            outputs.push(out);
            pool_indices.push(idx);
        }
        Ok(ActivationCache {
            input_shape: shape,
            names: self.layers.iter().map(|l| l.name.clone()).collect(),
            outputs,
            pool_indices,
        })
    }

    /// Sum over taps of the gradient of `sum(grad_t * activation_t)` with
    /// respect to the input image.
    pub fn backward_to_input(&self, cache: &ActivationCache, tap_grads: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        if cache.names.len() != self.layers.len() {
            return Err(NetError::CacheMismatch);
        }
        let mut deepest = None;
        for (tap, grad) in tap_grads {
            let idx = self.layer_index(tap).ok_or_else(|| NetError::UnknownTap(tap.clone()))?;
            let expected = cache.outputs[idx].shape();
            if grad.shape() != expected {
                return Err(NetError::GradShape {
                    tap: tap.clone(),
                    expected,
                    found: grad.shape(),
                });
            }
            deepest = deepest.max(Some(idx));
        }
        let Some(deepest) = deepest else {
            return Ok(Tensor::zeros(cache.input_shape));
        };

        let mut grad: Option<Tensor> = None;
        for i in (0..=deepest).rev() {
            let layer = &self.layers[i];
            if let Some(g) = tap_grads.get(&layer.name) {
                match grad.as_mut() {
                    Some(acc) => acc.add_scaled(g, 1.0).expect("shapes checked"),
                    None => grad = Some(g.clone()),
                }
            }
            let Some(g) = grad.take() else { continue };
            let input_shape = if i == 0 {
                cache.input_shape
            } else {
                cache.outputs[i - 1].shape()
            };
            let wrap = |source| NetError::Layer {
                layer: layer.name.clone(),
                source,
            };
            let next = match &layer.kind {
                LayerKind::Conv { weights } => {
                    tensor::conv2d_backward(&g, input_shape, &weights.kernel, Padding::Same, 1).map_err(wrap)?
                }
                LayerKind::Relu => {
                    let input = if i == 0 { None } else { Some(&cache.outputs[i - 1]) };
                    match input {
                        Some(x) => tensor::relu_backward(&g, x).map_err(wrap)?,
                        None => return Err(NetError::CacheMismatch),
                    }
                }
                LayerKind::MaxPool { .. } => {
                    let idx = cache.pool_indices[i].as_ref().ok_or(NetError::CacheMismatch)?;
                    tensor::maxpool_backward(&g, idx).map_err(wrap)?
                }
                LayerKind::AvgPool { size } => tensor::avgpool_backward(&g, input_shape, *size).map_err(wrap)?,
            };
            grad = Some(next);
        }
        Ok(grad.unwrap_or_else(|| Tensor::zeros(cache.input_shape)))
    }
}

/// Outputs of every layer of one forward pass, plus max-pool routing.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    input_shape: Shape,
    names: Vec<String>,
    outputs: Vec<Tensor>,
    pool_indices: Vec<Option<PoolIndices>>,
}

impl ActivationCache {
    pub fn get(&self, layer: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == layer).map(|i| &self.outputs[i])
    }

    pub fn tap(&self, layer: &str) -> Result<&Tensor> {
        self.get(layer).ok_or_else(|| NetError::UnknownTap(layer.to_owned()))
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }
}

fn vgg_layers(store: &WeightStore, channels: [usize; 5], pooling: PoolingMode) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::with_capacity(37);
    let mut in_c = 3;
    for (b, (&convs, &out_c)) in VGG19_BLOCKS.iter().zip(&channels).enumerate() {
        let block = b + 1;
        for i in 1..=convs {
            let name = format!("conv{block}_{i}");
            let weights = store.get(&name).ok_or_else(|| NetError::MissingWeight(name.clone()))?;
            let expected = Shape::new(out_c, in_c, 3, 3);
            if weights.kernel.shape() != expected {
                return Err(NetError::WeightShape {
                    layer: name,
                    expected,
                    found: weights.kernel.shape(),
                });
            }
            layers.push(LayerSpec {
                name,
                kind: LayerKind::Conv {
                    weights: weights.clone(),
                },
            });
            layers.push(LayerSpec {
                name: format!("relu{block}_{i}"),
                kind: LayerKind::Relu,
            });
            in_c = out_c;
        }
        layers.push(LayerSpec {
            name: format!("pool{block}"),
            kind: match pooling {
                PoolingMode::Max => LayerKind::MaxPool { size: 2 },
                PoolingMode::Avg => LayerKind::AvgPool { size: 2 },
            },
        });
    }
    Ok(layers)
}

/// Full VGG-19 convolutional stack (16 conv + 16 relu + 5 pool layers).
pub fn build_vgg19(store: &WeightStore, pooling: PoolingMode) -> Result<NetworkGraph> {
    Ok(NetworkGraph::new(vgg_layers(store, VGG19_CHANNELS, pooling)?))
}

/// VGG-19 topology with 4/8/8/8/8 channels and seeded random weights.
pub fn build_tiny_vgg19(seed: u64, pooling: PoolingMode) -> NetworkGraph {
    let store = tiny_vgg19_weights(seed);
    NetworkGraph::new(vgg_layers(&store, TINY_CHANNELS, pooling).expect("tiny weights match tiny topology"))
}

/// He-initialised weights for the tiny network, small uniform biases.
pub fn tiny_vgg19_weights(seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    let mut in_c = 3;
    for (b, (&convs, &out_c)) in VGG19_BLOCKS.iter().zip(&TINY_CHANNELS).enumerate() {
        for i in 1..=convs {
            let shape = Shape::new(out_c, in_c, 3, 3);
            let normal = Normal::new(0.0f32, (2.0 / (in_c * 9) as f32).sqrt()).expect("positive std");
            let kernel: Vec<f32> = (0..shape.len()).map(|_| normal.sample(&mut rng)).collect();
            let bias = (0..out_c).map(|_| rng.random_range(-0.1f32..0.1)).collect();
            let weights = ConvWeights {
                kernel: Tensor::from_vec(shape, kernel).expect("length matches"),
                bias,
            };
            store
                .insert(format!("conv{}_{i}", b + 1), weights)
                .expect("fresh finite entry");
            in_c = out_c;
        }
    }
    store
}
