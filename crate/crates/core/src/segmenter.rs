//! Small fully-convolutional segmenter producing per-pixel class logits at
//! input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{argmax_channels, SegMask};
use crate::tensor::{self, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub out_channels: usize,
}

/// Architecture descriptor: conv layers with ReLU between them; the last
/// layer emits `classes` channels without activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv3x3(3->16), conv3x3(16->32), conv3x3(32->32), conv1x1(32->C).
    pub fn reference(classes: usize) -> Self {
        Self::with_widths(&[16, 32, 32], classes)
    }

    /// 3x3 hidden layers of the given widths followed by a 1x1 classifier.
    pub fn with_widths(widths: &[usize], classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = widths
            .iter()
            .map(|&w| LayerSpec {
                kernel: 3,
                out_channels: w,
            })
            .collect();
        layers.push(LayerSpec {
            kernel: 1,
            out_channels: classes,
        });
        Architecture {
            input_channels: 3,
            layers,
        }
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if self.classes() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes()
            )));
        }
        for l in &self.layers {
            if l.kernel % 2 == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("invalid layer {l:?}")));
            }
        }
        Ok(())
    }

    /// `(kernel dims, bias dims)` per layer.
    pub fn shapes(&self) -> Vec<([usize; 4], usize)> {
        let mut cin = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                let s = ([l.kernel, l.kernel, cin, l.out_channels], l.out_channels);
                cin = l.out_channels;
                s
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(k, b)| k.iter().product::<usize>() + b)
            .sum()
    }
}

/// Kernel and bias tensors, interleaved `[k0, b0, k1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams<S: Scalar = f32> {
    pub arch: Architecture,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> SegmenterParams<S> {
    pub fn new(arch: Architecture, tensors: Vec<Tensor<S>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.shapes();
        if tensors.len() != 2 * shapes.len() {
            return Err(Error::dim(format!(
                "architecture needs {} tensors, got {}",
                2 * shapes.len(),
                tensors.len()
            )));
        }
        for ((k, b), pair) in shapes.iter().zip(tensors.chunks(2)) {
            if pair[0].dims() != k || pair[1].dims() != [*b] {
                return Err(Error::dim(format!(
                    "layer expects kernel {k:?} bias [{b}], got {:?} {:?}",
                    pair[0].dims(),
                    pair[1].dims()
                )));
            }
        }
        Ok(SegmenterParams { arch, tensors })
    }

    pub fn cast<T: Scalar>(&self) -> SegmenterParams<T> {
        SegmenterParams {
            arch: self.arch.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Add every tensor to the graph as a trainable leaf.
    pub fn register(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }
}

/// He-normal kernels with std `sqrt(2 / fan_in)`, zero biases.
pub fn init_params<S: Scalar>(arch: &Architecture, seed: u64) -> Result<SegmenterParams<S>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (k, b) in arch.shapes() {
        let fan_in = (k[0] * k[1] * k[2]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        tensors.push(Tensor::from_fn(&k, |_| S::lit(normal.sample(&mut rng))));
        tensors.push(Tensor::zeros(&[b]));
    }
    SegmenterParams::new(arch.clone(), tensors)
}

fn check_image<S: Scalar>(image: &Tensor<S>, arch: &Architecture) -> Result<()> {
    let (_, _, c) = image.hwc()?;
    if c != arch.input_channels {
        return Err(Error::dim(format!(
            "image has {c} channels, architecture expects {}",
            arch.input_channels
        )));
    }
    Ok(())
}

/// Record the forward pass on a graph given registered parameter vars.
pub fn segmenter_forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    arch: &Architecture,
    image: Var,
    params: &[Var],
) -> Result<Var> {
    check_image(g.value(image), arch)?;
    if params.len() != 2 * arch.layers.len() {
        return Err(Error::dim("parameter vars do not match architecture"));
    }
    let mut x = image;
    let last = arch.layers.len() - 1;
    for (i, pair) in params.chunks(2).enumerate() {
        x = g.conv2d(x, pair[0], pair[1])?;
        if i < last {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Inference-only forward pass.
pub fn segmenter_forward<S: Scalar>(image: &Tensor<S>, params: &SegmenterParams<S>) -> Result<Tensor<S>> {
    check_image(image, &params.arch)?;
    let mut x = image.clone();
    let last = params.arch.layers.len() - 1;
    for (i, pair) in params.tensors.chunks(2).enumerate() {
        x = tensor::conv2d(&x, &pair[0], &pair[1])?;
        if i < last {
            x = tensor::relu(&x);
        }
    }
    Ok(x)
}

/// Per-pixel argmax, lowest class on ties.
pub fn predict<S: Scalar>(logits: &Tensor<S>) -> Result<SegMask> {
    let (h, w, _) = logits.hwc()?;
    SegMask::new(h, w, argmax_channels(logits)?)
}
