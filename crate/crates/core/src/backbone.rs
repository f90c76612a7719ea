//! Plain convolutional backbone: conv + bias + activation blocks, global
//! average pooling and a linear classifier.
//!
//! Layers are numbered `L0..L(K-1)` over parameterized conv layers only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn kernel_numel(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_dim(h, self.kernel_size, self.stride, self.padding)?,
            conv_out_dim(w, self.kernel_size, self.stride, self.padding)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// `[C, H, W]` of a single input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Spec(format!(
                "backbone needs at least 2 layers, got {}",
                self.layers.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("num_classes must be >= 2".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero dimension", self.input)));
        }
        let mut channels = self.input[0];
        for (k, l) in self.layers.iter().enumerate() {
            if l.in_channels != channels {
                return Err(Error::Spec(format!(
                    "L{k} expects {} input channels but receives {channels}",
                    l.in_channels
                )));
            }
            if l.out_channels == 0 || l.kernel_size % 2 == 0 || !(1..=2).contains(&l.stride) {
                return Err(Error::Spec(format!(
                    "L{k}: need out_channels > 0, odd kernel_size, stride in {{1, 2}}"
                )));
            }
            channels = l.out_channels;
        }
        self.spatial_sizes().map(|_| ())
    }

    /// Spatial size entering each layer, followed by the final feature map size.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let mut sizes = vec![(self.input[1], self.input[2])];
        for (k, l) in self.layers.iter().enumerate() {
            let (h, w) = *sizes.last().unwrap();
            let next = l
                .output_hw(h, w)
                .ok_or_else(|| Error::Spec(format!("L{k}: {h}x{w} input too small for kernel")))?;
            sizes.push(next);
        }
        Ok(sizes)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(self.input[0], |l| l.out_channels)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.input[0], self.input[1], self.input[2]]
    }
}

/// Parameters of one plain backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// `features × classes`.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Activation gain used for fan-in scaling.
pub fn init_gain(activation: Activation) -> f64 {
    match activation {
        Activation::Relu => std::f64::consts::SQRT_2,
        Activation::None => 1.0,
    }
}

/// Uniform `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`, i.e. std `gain / sqrt(fan_in)`.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub fn init_kernel(rng: &mut impl Rng, layer: &LayerSpec) -> Tensor {
    let fan_in = layer.in_channels * layer.kernel_size * layer.kernel_size;
    fan_in_uniform(rng, &layer.kernel_shape(), fan_in, init_gain(layer.activation))
}

pub fn build(spec: &BackboneSpec, seed: u64) -> Result<BackboneParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = spec.layers.iter().map(|l| init_kernel(&mut rng, l)).collect();
    let biases = spec.layers.iter().map(|l| Tensor::zeros(&[l.out_channels])).collect();
    let f = spec.feature_dim();
    let head_weight = fan_in_uniform(&mut rng, &[f, spec.num_classes], f, 1.0);
    Ok(BackboneParams {
        kernels,
        biases,
        head_weight,
        head_bias: Tensor::zeros(&[spec.num_classes]),
    })
}

pub(crate) fn check_input(spec: &BackboneSpec, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1..] != spec.input {
        return Err(Error::shape("backbone input", &spec.input_shape(1), shape));
    }
    Ok(())
}

/// conv → channel bias → activation.
pub fn conv_block(tape: &mut Tape, layer: &LayerSpec, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = tape.conv2d(x, kernel, layer.stride, layer.padding)?;
    let y = tape.add_channel_bias(y, bias)?;
    match layer.activation {
        Activation::Relu => tape.relu(y),
        Activation::None => Ok(y),
    }
}

/// global average pool → linear. Returns `(pooled features, logits)`.
pub fn pooled_head(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let feats = tape.global_avg_pool(x)?;
    let logits = tape.matmul(feats, weight)?;
    let logits = tape.add_row_bias(logits, bias)?;
    Ok((feats, logits))
}

/// Backbone parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BackboneParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        BackboneVars {
            kernels: self.kernels.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            biases: self.biases.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            head_weight: tape.leaf(self.head_weight.clone(), trainable),
            head_bias: tape.leaf(self.head_bias.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.kernels
            .iter()
            .chain(&self.biases)
            .chain([&self.head_weight, &self.head_bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.kernels
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain([&mut self.head_weight, &mut self.head_bias])
    }
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.kernels.clone();
        v.extend(&self.biases);
        v.push(self.head_weight);
        v.push(self.head_bias);
        v
    }
}

/// Differentiable forward. Returns `(features, logits)`.
pub fn forward_vars(tape: &mut Tape, spec: &BackboneSpec, vars: &BackboneVars, x: Var) -> Result<(Var, Var)> {
    check_input(spec, tape.shape(x))?;
    let mut h = x;
    for (k, layer) in spec.layers.iter().enumerate() {
        h = conv_block(tape, layer, h, vars.kernels[k], vars.biases[k])?;
    }
    pooled_head(tape, h, vars.head_weight, vars.head_bias)
}

/// Inference forward: `B×C×H×W -> B×num_classes` logits.
pub fn forward(params: &BackboneParams, spec: &BackboneSpec, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(input.clone());
    let (_, logits) = forward_vars(&mut tape, spec, &vars, x)?;
    Ok(tape.value(logits).clone())
}

/// Weights plus biases, classifier included.
pub fn count_params(spec: &BackboneSpec) -> usize {
    let conv: usize = spec
        .layers
        .iter()
        .map(|l| l.kernel_numel() + l.out_channels)
        .sum();
    conv + spec.feature_dim() * spec.num_classes + spec.num_classes
}

/// MAdds of each conv layer for one image (`outH·outW·outC·inC·k·k`).
pub fn layer_madds(spec: &BackboneSpec) -> Result<Vec<u64>> {
    let sizes = spec.spatial_sizes()?;
    Ok(spec
        .layers
        .iter()
        .zip(&sizes[1..])
        .map(|(l, &(oh, ow))| (oh * ow * l.kernel_numel()) as u64)
        .collect())
}

/// Per-image MAdds of convs plus the classifier; biases are not counted.
pub fn count_madds(spec: &BackboneSpec) -> Result<u64> {
    let conv: u64 = layer_madds(spec)?.iter().sum();
    Ok(conv + (spec.feature_dim() * spec.num_classes) as u64)
}
