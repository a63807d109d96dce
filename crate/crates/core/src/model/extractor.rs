//! Convolutional spatial extractors. Each variant is a [`FeatureExtractor`]
//! that expands a block schedule into a flat layer plan; the plan is executed
//! by [`ExtractorPlan`]. Variants are looked up by name in an
//! [`ExtractorRegistry`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d, conv2d_backward, conv_output_len, depthwise_conv2d, depthwise_conv2d_backward,
    maxpool2d, maxpool2d_backward, relu, relu_backward, MaxPoolCache, Params, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub variant: String,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels of each convolution, grouped into blocks that end in a
    /// 2x2 max pool. `None` uses the variant's own schedule.
    pub blocks: Option<Vec<Vec<usize>>>,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self {
            variant: "vgg_s".into(),
            input_height: 64,
            input_width: 64,
            input_channels: 3,
            blocks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        padding: usize,
    },
    Depthwise {
        name: String,
        kernel: usize,
        channels: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    fn default_blocks(&self) -> Vec<Vec<usize>>;

    /// Expands a block schedule into layers for an input with `in_channels`.
    fn layers(&self, blocks: &[Vec<usize>], in_channels: usize) -> Vec<Layer>;
}

fn conv3(name: String, in_channels: usize, out_channels: usize) -> Layer {
    Layer::Conv {
        name,
        kernel: 3,
        in_channels,
        out_channels,
        padding: 1,
    }
}

/// Stacked 3x3 convolutions, several per block.
#[derive(Debug, Default)]
pub struct VggS;

impl FeatureExtractor for VggS {
    fn name(&self) -> &'static str {
        "vgg_s"
    }

    fn default_blocks(&self) -> Vec<Vec<usize>> {
        vec![vec![8], vec![8, 8], vec![16, 16]]
    }

    fn layers(&self, blocks: &[Vec<usize>], in_channels: usize) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for (b, block) in blocks.iter().enumerate() {
            for (i, &out) in block.iter().enumerate() {
                layers.push(conv3(format!("conv{}_{}", b + 1, i + 1), c, out));
                layers.push(Layer::Relu);
                c = out;
            }
            layers.push(Layer::MaxPool { window: 2 });
        }
        layers
    }
}

/// One 3x3 convolution per block.
#[derive(Debug, Default)]
pub struct PlainS;

impl FeatureExtractor for PlainS {
    fn name(&self) -> &'static str {
        "plain_s"
    }

    fn default_blocks(&self) -> Vec<Vec<usize>> {
        vec![vec![8], vec![16], vec![16]]
    }

    fn layers(&self, blocks: &[Vec<usize>], in_channels: usize) -> Vec<Layer> {
        // same expansion as vgg_s; the difference is the shallower schedule
        VggS.layers(blocks, in_channels)
    }
}

/// Standard first convolution, then depthwise 3x3 + pointwise 1x1 pairs.
#[derive(Debug, Default)]
pub struct DepthwiseS;

impl FeatureExtractor for DepthwiseS {
    fn name(&self) -> &'static str {
        "depthwise_s"
    }

    fn default_blocks(&self) -> Vec<Vec<usize>> {
        vec![vec![8], vec![16], vec![16]]
    }

    fn layers(&self, blocks: &[Vec<usize>], in_channels: usize) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut c = in_channels;
        let mut first = true;
        for (b, block) in blocks.iter().enumerate() {
            for (i, &out) in block.iter().enumerate() {
                let tag = format!("{}_{}", b + 1, i + 1);
                if first {
                    layers.push(conv3(format!("conv{tag}"), c, out));
                    first = false;
                } else {
                    layers.push(Layer::Depthwise {
                        name: format!("dw{tag}"),
                        kernel: 3,
                        channels: c,
                        padding: 1,
                    });
                    layers.push(Layer::Relu);
                    layers.push(Layer::Conv {
                        name: format!("pw{tag}"),
                        kernel: 1,
                        in_channels: c,
                        out_channels: out,
                        padding: 0,
                    });
                }
                layers.push(Layer::Relu);
                c = out;
            }
            layers.push(Layer::MaxPool { window: 2 });
        }
        layers
    }
}

pub struct ExtractorRegistry {
    entries: Vec<Box<dyn FeatureExtractor>>,
}

impl fmt::Debug for ExtractorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut registry = Self { entries: Vec::new() };
        registry.register(Box::new(VggS));
        registry.register(Box::new(PlainS));
        registry.register(Box::new(DepthwiseS));
        registry
    }
}

impl ExtractorRegistry {
    /// Later registrations replace earlier ones of the same name.
    pub fn register(&mut self, extractor: Box<dyn FeatureExtractor>) {
        self.entries.retain(|e| e.name() != extractor.name());
        self.entries.push(extractor);
    }

    pub fn get(&self, name: &str) -> Result<&dyn FeatureExtractor> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown extractor `{name}` (available: {})",
                    self.names().collect::<Vec<_>>().join(", ")
                ))
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|e| e.name())
    }
}

/// Cached activations of one layer, needed by the backward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor),
    Pool(MaxPoolCache),
}

#[derive(Debug, Clone)]
pub struct ExtractorCache {
    layers: Vec<LayerCache>,
}

/// A resolved layer plan with its output geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorPlan {
    variant: String,
    layers: Vec<Layer>,
    input_dims: [usize; 3],
    output_dims: [usize; 3],
}

impl ExtractorPlan {
    pub fn new(spec: &FeatureExtractorSpec, registry: &ExtractorRegistry) -> Result<Self> {
        let extractor = registry.get(&spec.variant)?;
        let blocks = spec.blocks.clone().unwrap_or_else(|| extractor.default_blocks());
        if blocks.is_empty() || blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::config(format!(
                "extractor blocks {blocks:?} must be non-empty with positive channel counts"
            )));
        }
        if spec.input_channels == 0 {
            return Err(Error::config("extractor input needs at least one channel"));
        }
        let layers = extractor.layers(&blocks, spec.input_channels);
        let input_dims = [spec.input_height, spec.input_width, spec.input_channels];
        let mut dims = input_dims;
        for layer in &layers {
            dims = match *layer {
                Layer::Conv {
                    kernel,
                    out_channels,
                    padding,
                    ..
                } => [
                    conv_output_len(dims[0], kernel, 1, padding).unwrap_or(0),
                    conv_output_len(dims[1], kernel, 1, padding).unwrap_or(0),
                    out_channels,
                ],
                Layer::Depthwise { kernel, padding, .. } => [
                    conv_output_len(dims[0], kernel, 1, padding).unwrap_or(0),
                    conv_output_len(dims[1], kernel, 1, padding).unwrap_or(0),
                    dims[2],
                ],
                Layer::Relu => dims,
                Layer::MaxPool { window } => [dims[0] / window, dims[1] / window, dims[2]],
            };
            if dims[0] == 0 || dims[1] == 0 {
                return Err(Error::config(format!(
                    "{}x{} input is too small for extractor `{}`",
                    spec.input_height, spec.input_width, spec.variant
                )));
            }
        }
        Ok(Self {
            variant: spec.variant.clone(),
            layers,
            input_dims,
            output_dims: dims,
        })
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    /// `H_f x W_f x C_f` of the final feature map.
    pub fn output_dims(&self) -> [usize; 3] {
        self.output_dims
    }

    pub fn feature_len(&self) -> usize {
        self.output_dims.iter().product()
    }

    /// `(name, dims, fan_in)` of every parameter tensor, names relative to the
    /// branch prefix.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    name,
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let fan_in = kernel * kernel * in_channels;
                    out.push((
                        format!("{name}.kernel"),
                        vec![*kernel, *kernel, *in_channels, *out_channels],
                        fan_in,
                    ));
                    out.push((format!("{name}.bias"), vec![*out_channels], fan_in));
                }
                Layer::Depthwise {
                    name,
                    kernel,
                    channels,
                    ..
                } => {
                    let fan_in = kernel * kernel;
                    out.push((format!("{name}.kernel"), vec![*kernel, *kernel, *channels], fan_in));
                    out.push((format!("{name}.bias"), vec![*channels], fan_in));
                }
                Layer::Relu | Layer::MaxPool { .. } => {}
            }
        }
        out
    }

    fn param<'a>(params: &'a Params, prefix: &str, name: &str, what: &str) -> Result<&'a Tensor> {
        params.get(&format!("{prefix}.{name}.{what}"))
    }

    /// Returns the final feature map (`H_f x W_f x C_f`); flattening it in
    /// row-major order is free.
    pub fn forward(&self, params: &Params, prefix: &str, image: &Tensor) -> Result<Tensor> {
        self.run(params, prefix, image, false).map(|(t, _)| t)
    }

    pub fn forward_cached(
        &self,
        params: &Params,
        prefix: &str,
        image: &Tensor,
    ) -> Result<(Tensor, ExtractorCache)> {
        self.run(params, prefix, image, true)
    }

    fn run(
        &self,
        params: &Params,
        prefix: &str,
        image: &Tensor,
        keep: bool,
    ) -> Result<(Tensor, ExtractorCache)> {
        image.expect_dims("extractor input", &self.input_dims)?;
        let mut x = image.clone();
        let mut caches = Vec::new();
        for layer in &self.layers {
            let y = match layer {
                Layer::Conv { name, padding, .. } => conv2d(
                    &x,
                    Self::param(params, prefix, name, "kernel")?,
                    Self::param(params, prefix, name, "bias")?,
                    1,
                    *padding,
                )?,
                Layer::Depthwise { name, padding, .. } => depthwise_conv2d(
                    &x,
                    Self::param(params, prefix, name, "kernel")?,
                    Self::param(params, prefix, name, "bias")?,
                    1,
                    *padding,
                )?,
                Layer::Relu => relu(&x),
                Layer::MaxPool { window } => {
                    let (y, cache) = maxpool2d(&x, *window, *window)?;
                    if keep {
                        caches.push(LayerCache::Pool(cache));
                    }
                    x = y;
                    continue;
                }
            };
            if keep {
                caches.push(LayerCache::Input(x));
            }
            x = y;
        }
        Ok((x, ExtractorCache { layers: caches }))
    }

    /// Parameter gradients (full names) for one image given the gradient of
    /// the final feature map.
    pub fn backward(
        &self,
        params: &Params,
        prefix: &str,
        cache: &ExtractorCache,
        grad_out: &Tensor,
    ) -> Result<Params> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::shape("extractor cache does not match the layer plan"));
        }
        let mut grads = Params::new();
        let mut g = grad_out.clone();
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let needs_input = i > 0;
            g = match (layer, lc) {
                (Layer::Conv { name, padding, .. }, LayerCache::Input(x)) => {
                    let k = Self::param(params, prefix, name, "kernel")?;
                    let cg = conv2d_backward(x, k, 1, *padding, &g)?;
                    grads.insert(format!("{prefix}.{name}.kernel"), cg.kernel);
                    grads.insert(format!("{prefix}.{name}.bias"), cg.bias);
                    cg.input
                }
                (Layer::Depthwise { name, padding, .. }, LayerCache::Input(x)) => {
                    let k = Self::param(params, prefix, name, "kernel")?;
                    let cg = depthwise_conv2d_backward(x, k, 1, *padding, &g)?;
                    grads.insert(format!("{prefix}.{name}.kernel"), cg.kernel);
                    grads.insert(format!("{prefix}.{name}.bias"), cg.bias);
                    cg.input
                }
                (Layer::Relu, LayerCache::Input(x)) => relu_backward(x, &g)?,
                (Layer::MaxPool { .. }, LayerCache::Pool(pc)) => maxpool2d_backward(pc, &g)?,
                _ => return Err(Error::shape("extractor cache does not match the layer plan")),
            };
            if !needs_input {
                break;
            }
        }
        Ok(grads)
    }
}
