//! GAP/GMP-head convolutional networks: construction, forward and backward
//! passes, head swapping and training.

mod arch;
mod train;

pub use arch::{ArchConfig, LayerSpec, PoolingKind, MIN_MAPPING_RESOLUTION};
pub use train::{train, EpochMetrics, Labeled, LrSchedule, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::nn::{self, conv2d_backward_params};
use crate::tensor::{Real, Tensor};

/// Stream offset separating classifier re-initialization from construction.
const HEAD_REINIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvLayer<T> {
    fn init(out: usize, inp: usize, k: usize, stride: usize, pad: usize, rng: &mut Pcg64) -> Self {
        let bound = (1.0 / (inp * k * k) as f64).sqrt();
        Self {
            weights: uniform(&[out, inp, k, k], bound, rng),
            bias: uniform(&[out], bound, rng),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::conv2d_forward(x, &self.weights, &self.bias, self.stride, self.pad)
    }

    fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut Pcg64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Real> {
    Conv(ConvLayer<T>),
    Relu,
    MaxPool,
}

/// Everything a single forward pass exposes to CAM computation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real = f32> {
    /// Head conv output after ReLU, `K×h×w`.
    pub feature_maps: Tensor<T>,
    /// Pooled unit activations, length `K`.
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// Class ids sorted by descending probability, ties to the lower id.
    pub fn ranked_classes(&self) -> Vec<usize> {
        let p = self.probs.data();
        let mut ids: Vec<usize> = (0..p.len()).collect();
        ids.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal));
        ids
    }

    pub fn predicted(&self) -> usize {
        self.probs.argmax()
    }
}

/// Intermediate activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    layer_inputs: Vec<Tensor<T>>,
    head_input: Tensor<T>,
    head_pre: Tensor<T>,
}

/// Gradients for every parameter, in [`GapNet::param_names`] order, plus the
/// input gradient when requested.
#[derive(Debug, Clone)]
pub struct NetGrad<T: Real> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapNet<T: Real = f32> {
    arch: ArchConfig,
    backbone: Vec<Layer<T>>,
    head: ConvLayer<T>,
    classifier: Tensor<T>,
    mapping_resolution: (usize, usize),
}

/// Builds a network from `config` with fan-in scaled uniform initialization
/// drawn from a PCG stream seeded with `seed`.
pub fn build_gapnet<T: Real>(config: &ArchConfig, seed: u64) -> Result<GapNet<T>> {
    let mapping_resolution = config.mapping_resolution()?;
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut channels = config.input.0;
    let mut backbone = Vec::with_capacity(config.backbone.len());
    for layer in &config.backbone {
        backbone.push(match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let layer = ConvLayer::init(out_channels, channels, kernel, stride, pad, &mut rng);
                channels = out_channels;
                Layer::Conv(layer)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
        });
    }
    let head = ConvLayer::init(config.head_units, channels, 3, 1, 1, &mut rng);
    let classifier = init_classifier(config, &mut rng);
    Ok(GapNet {
        arch: config.clone(),
        backbone,
        head,
        classifier,
        mapping_resolution,
    })
}

fn init_classifier<T: Real>(config: &ArchConfig, rng: &mut Pcg64) -> Tensor<T> {
    let bound = (1.0 / config.head_units as f64).sqrt();
    uniform(&[config.classes, config.head_units], bound, rng)
}

/// Copy of `net` with `pooling` in place of its pooling kind and a freshly
/// initialized classifier. Backbone and head conv parameters are untouched.
pub fn swap_head<T: Real>(net: &GapNet<T>, pooling: PoolingKind, seed: u64) -> GapNet<T> {
    let mut out = net.clone();
    out.arch.pooling = pooling;
    let mut rng = Pcg64::seed_from_u64(seed ^ HEAD_REINIT_STREAM);
    out.classifier = init_classifier(&out.arch, &mut rng);
    out
}

impl<T: Real> GapNet<T> {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn pooling(&self) -> PoolingKind {
        self.arch.pooling
    }

    pub fn backbone(&self) -> &[Layer<T>] {
        &self.backbone
    }

    pub fn head(&self) -> &ConvLayer<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ConvLayer<T> {
        &mut self.head
    }

    /// Classifier weights `C×K`.
    pub fn classifier(&self) -> &Tensor<T> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Tensor<T> {
        &mut self.classifier
    }

    pub fn mapping_resolution(&self) -> (usize, usize) {
        self.mapping_resolution
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let (c, h, w) = self.arch.input;
        [c, h, w]
    }

    pub fn class_count(&self) -> usize {
        self.arch.classes
    }

    pub fn unit_count(&self) -> usize {
        self.arch.head_units
    }

    pub fn cast<U: Real>(&self) -> GapNet<U> {
        GapNet {
            arch: self.arch.clone(),
            backbone: self
                .backbone
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(c.cast()),
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool => Layer::MaxPool,
                })
                .collect(),
            head: self.head.cast(),
            classifier: self.classifier.cast(),
            mapping_resolution: self.mapping_resolution,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            if let Layer::Conv(c) = l {
                out.push((format!("backbone.{i}.weight"), &c.weights));
                out.push((format!("backbone.{i}.bias"), &c.bias));
            }
        }
        out.push(("head.weight".into(), &self.head.weights));
        out.push(("head.bias".into(), &self.head.bias));
        out.push(("classifier.weight".into(), &self.classifier));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut() {
            if let Layer::Conv(c) = l {
                out.push(&mut c.weights);
                out.push(&mut c.bias);
            }
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out.push(&mut self.classifier);
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }

    /// Backbone and head-conv parameters, in order; excludes the classifier.
    pub fn feature_params(&self) -> Vec<&Tensor<T>> {
        let named = self.named_params();
        let n = named.len() - 1;
        named.into_iter().take(n).map(|(_, t)| t).collect()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(Error::shape("set_flat_params", &[total], &[flat.len()]));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces parameters by name. Every parameter must be supplied exactly
    /// once with its expected shape.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let names = self.param_names();
        if tensors.len() != names.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                names.len(),
                tensors.len()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; names.len()];
        for (name, t) in tensors {
            let i = names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::invalid(format!("unexpected parameter {name:?}")))?;
            if slots[i].replace(t).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name:?}")));
            }
        }
        let shapes = self.param_shapes();
        for (((p, slot), shape), name) in self.params_mut().into_iter().zip(slots).zip(shapes).zip(&names) {
            let t = slot.ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("checkpoint parameter", &shape, t.shape()));
            }
            *p = t;
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.forward_cached(image).map(|(trace, _)| trace)
    }

    pub fn forward_cached(&self, image: &Tensor<T>) -> Result<(ForwardTrace<T>, ForwardCache<T>)> {
        image.expect_shape("gapnet input", &self.input_shape())?;
        let mut x = image.clone();
        let mut layer_inputs = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let y = match layer {
                Layer::Conv(c) => c.forward(&x)?,
                Layer::Relu => nn::relu_forward(&x),
                Layer::MaxPool => nn::maxpool2x2_forward(&x)?,
            };
            layer_inputs.push(std::mem::replace(&mut x, y));
        }
        let head_pre = self.head.forward(&x)?;
        let feature_maps = nn::relu_forward(&head_pre);
        let features = self.pool(&feature_maps)?;
        let (logits, probs) = nn::linear_softmax_forward(&features, &self.classifier)?;
        Ok((
            ForwardTrace {
                feature_maps,
                features,
                logits,
                probs,
            },
            ForwardCache {
                layer_inputs,
                head_input: x,
                head_pre,
            },
        ))
    }

    /// Pools `K×h×w` maps with this network's pooling kind.
    pub fn pool(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        match self.arch.pooling {
            PoolingKind::Gap => nn::gap_forward(maps),
            PoolingKind::Gmp => nn::gmp_forward(maps),
        }
    }

    /// Backpropagates `∂L/∂S` through the whole network.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        cache: &ForwardCache<T>,
        d_logits: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<NetGrad<T>> {
        let (d_cls, d_feat) =
            nn::linear_softmax_backward(&trace.features, &self.classifier, d_logits)?;
        let d_maps = match self.arch.pooling {
            PoolingKind::Gap => nn::gap_backward(trace.feature_maps.shape(), &d_feat)?,
            PoolingKind::Gmp => nn::gmp_backward(&trace.feature_maps, &d_feat)?,
        };
        let d_pre = nn::relu_backward(&cache.head_pre, &d_maps)?;
        let hg = nn::conv2d_backward(
            &cache.head_input,
            &self.head.weights,
            self.head.stride,
            self.head.pad,
            &d_pre,
        )?;
        let mut rev_params = vec![d_cls];
        rev_params.extend(hg.params.into_iter().rev());
        let mut g = hg.input;
        let first_conv = self.backbone.iter().position(|l| matches!(l, Layer::Conv(_)));
        for (i, layer) in self.backbone.iter().enumerate().rev() {
            let x = &cache.layer_inputs[i];
            match layer {
                Layer::Conv(c) if !want_input_grad && Some(i) == first_conv => {
                    // nothing below the first conv has parameters
                    let (dw, db) = conv2d_backward_params(x, &c.weights, c.stride, c.pad, &g)?;
                    rev_params.push(db);
                    rev_params.push(dw);
                    break;
                }
                Layer::Conv(c) => {
                    let lg = nn::conv2d_backward(x, &c.weights, c.stride, c.pad, &g)?;
                    rev_params.extend(lg.params.into_iter().rev());
                    g = lg.input;
                }
                Layer::Relu => g = nn::relu_backward(x, &g)?,
                Layer::MaxPool => g = nn::maxpool2x2_backward(x, &g)?,
            }
        }
        let input_grad = want_input_grad.then_some(g);
        rev_params.reverse();
        Ok(NetGrad {
            params: rev_params,
            input: input_grad,
        })
    }

    /// Cross-entropy loss and full gradient for one labelled image.
    pub fn loss_and_grad(&self, image: &Tensor<T>, label: usize) -> Result<(T, ForwardTrace<T>, NetGrad<T>)> {
        let (trace, cache) = self.forward_cached(image)?;
        let (loss, d_logits) = nn::cross_entropy_loss(&trace.probs, label)?;
        let grad = self.backward(&trace, &cache, &d_logits, false)?;
        Ok((loss, trace, grad))
    }
}
