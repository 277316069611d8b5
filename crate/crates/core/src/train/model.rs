//! Small sequential CNN with mask slots between blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{apply_mask, apply_mask_backward, MaskShape};
use crate::nn::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, Conv2d, Dense,
};
use crate::rng::RngStream;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    MaxPool2,
    Dense { out: usize },
    /// Point where a drop mask multiplies the activations during training.
    Mask,
}

/// Layer list with its input shape `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// `conv3x3 -> relu [-> maxpool] [-> mask]` per width, then a dense
    /// classifier. Blocks after the first are pooled; `mask_after` lists the
    /// block indices followed by a mask slot.
    pub fn conv_stack(input: [usize; 3], classes: usize, widths: &[usize], mask_after: &[usize]) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::invalid("model needs at least one conv block"));
        }
        if let Some(&bad) = mask_after.iter().find(|&&i| i >= widths.len()) {
            return Err(Error::invalid(format!("mask placement {bad} beyond {} conv blocks", widths.len())));
        }
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::Conv { out: w, kernel: 3, stride: 1, padding: 1 });
            layers.push(LayerSpec::Relu);
            if i > 0 {
                layers.push(LayerSpec::MaxPool2);
            }
            if mask_after.contains(&i) {
                layers.push(LayerSpec::Mask);
            }
        }
        layers.push(LayerSpec::Dense { out: classes });
        let spec = Self { input, classes, layers };
        spec.shapes()?;
        Ok(spec)
    }

    /// Activation shape `(c, h, w)` after each layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv { out, kernel, stride, padding } => {
                    let (ph, pw) = (cur[1] + 2 * padding, cur[2] + 2 * padding);
                    if kernel > ph || kernel > pw || stride == 0 {
                        return Err(Error::shape("model conv layer", &[idx, kernel, kernel], &cur));
                    }
                    [out, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1]
                }
                LayerSpec::Relu | LayerSpec::Mask => cur,
                LayerSpec::MaxPool2 => {
                    if !cur[1].is_multiple_of(2) || !cur[2].is_multiple_of(2) {
                        return Err(Error::shape("model maxpool needs even dims", &[idx], &cur));
                    }
                    [cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Dense { out } => [out, 1, 1],
            };
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) if *out == self.classes => Ok(shapes),
            _ => Err(Error::invalid("model must end in a dense layer with one output per class")),
        }
    }

    pub fn mask_shapes(&self) -> Result<Vec<MaskShape>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::Mask))
            .map(|(_, s)| MaskShape::new(s[0], s[1], s[2]))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool2,
    Dense(Dense),
    Mask { slot: usize },
}

/// Sequential network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<Layer>,
    mask_shapes: Vec<MaskShape>,
}

/// Gradient buffers in parameter declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor4>,
    argmax: Vec<Option<Vec<usize>>>,
    masks: Vec<Option<Tensor4>>,
}

impl Network {
    pub fn new(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut prev = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut slot = 0;
        for (layer, shape) in spec.layers.iter().zip(&shapes) {
            layers.push(match *layer {
                LayerSpec::Conv { out, kernel, stride, padding } => {
                    Layer::Conv(Conv2d::he_init(out, prev[0], kernel, stride, padding, rng))
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::Dense { out } => Layer::Dense(Dense::glorot_init(prev.iter().product(), out, rng)),
                LayerSpec::Mask => {
                    slot += 1;
                    Layer::Mask { slot: slot - 1 }
                }
            });
            prev = *shape;
        }
        let mask_shapes = spec.mask_shapes()?;
        Ok(Self { spec, layers, mask_shapes })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn mask_shapes(&self) -> &[MaskShape] {
        &self.mask_shapes
    }

    /// Parameter buffers in declaration order: per layer, weights then bias.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.data());
                    out.push(&c.bias[..]);
                }
                Layer::Dense(d) => {
                    out.push(&d.weight[..]);
                    out.push(&d.bias[..]);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.data_mut());
                    out.push(&mut c.bias[..]);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight[..]);
                    out.push(&mut d.bias[..]);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Order-sensitive FNV-1a hash over the parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Runs the network. `masks` holds one keep mask per slot, or is empty
    /// to run the full unmasked model.
    pub fn forward(&self, input: &Tensor4, masks: &[&Tensor4]) -> Result<(Tensor4, ForwardCache)> {
        if !masks.is_empty() && masks.len() != self.mask_shapes.len() {
            return Err(Error::shape("Network::forward masks", &[masks.len()], &[self.mask_shapes.len()]));
        }
        let [c, h, w] = self.spec.input;
        if input.shape()[1..] != [c, h, w] {
            return Err(Error::shape("Network::forward input", &input.shape(), &[input.batch(), c, h, w]));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            argmax: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let mut argmax = None;
            let mut used_mask = None;
            let y = match layer {
                Layer::Conv(conv) => conv2d_forward(&x, conv)?,
                Layer::Relu => relu_forward(&x),
                Layer::MaxPool2 => {
                    let (y, a) = maxpool2_forward(&x)?;
                    argmax = Some(a);
                    y
                }
                Layer::Dense(d) => dense_forward(&x, d)?,
                Layer::Mask { slot } => match masks.get(*slot) {
                    Some(m) => {
                        used_mask = Some((*m).clone());
                        apply_mask(&x, m)?
                    }
                    None => x.clone(),
                },
            };
            cache.inputs.push(std::mem::replace(&mut x, y));
            cache.argmax.push(argmax);
            cache.masks.push(used_mask);
        }
        Ok((x, cache))
    }

    /// Parameter gradients given the gradient at the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor4) -> Result<ParamGrads> {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = grad_logits.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[idx];
            g = match layer {
                Layer::Conv(conv) => {
                    let (gin, gp) = conv2d_backward(input, conv, &g)?;
                    grads.push(gp.bias);
                    grads.push(gp.weight.into_vec());
                    gin
                }
                Layer::Relu => relu_backward(input, &g)?,
                Layer::MaxPool2 => {
                    let argmax = cache.argmax[idx].as_ref().expect("pooling cache");
                    maxpool2_backward(input.shape(), argmax, &g)?
                }
                Layer::Dense(d) => {
                    let (gin, gp) = dense_backward(input, d, &g)?;
                    grads.push(gp.bias);
                    grads.push(gp.weight);
                    gin
                }
                Layer::Mask { .. } => match &cache.masks[idx] {
                    Some(m) => apply_mask_backward(&g, m)?,
                    None => g,
                },
            };
        }
        grads.reverse();
        Ok(ParamGrads(grads))
    }

    /// Predicted class per sample of the unmasked model.
    pub fn predict(&self, input: &Tensor4) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(input, &[])?;
        let k = self.classes();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}
