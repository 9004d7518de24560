//! The two 3D-CNN architectures, demographic fusion, and the forward /
//! reverse passes that connect the tensor primitives into a classifier.
//!
//! Both variants share the schedule three conv blocks (32, 64, 128
//! channels, each ending in a max-pool), a flatten, two fully connected
//! layers (512, 128) with dropout, and a softmax output head. The
//! Original variant stacks two convolutions per block, the Simplified
//! variant one.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{evaluate, train, EpochRecord, TrainHistory};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamMap;
use crate::tensor::{
    batch_norm, batch_norm_backward, conv3d, conv3d_backward, dense, dense_backward, dropout_apply,
    dropout_backward, group_norm, group_norm_backward, leaky_relu, leaky_relu_backward, maxpool3d,
    maxpool3d_backward, BatchNormCache, DropoutMask, GroupNormCache, NormState, Padding,
    PoolIndices, Scalar, Tensor,
};

/// Which architecture to build: two convolutions per block or one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Simplified,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "simplified" => Ok(Variant::Simplified),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected original|simplified)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Simplified => "simplified",
        })
    }
}

/// Normalization inserted after every convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Batch,
    Group,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "batch" => Ok(NormKind::Batch),
            "group" => Ok(NormKind::Group),
            other => Err(Error::InvalidArgument(format!(
                "unknown norm {other:?} (expected none|batch|group)"
            ))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
            NormKind::Group => "group",
        })
    }
}

/// Everything that defines a model besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub norm: NormKind,
    /// Concatenate [z-scored age, sex] onto the last FC output (128 → 130)
    /// before the classification head.
    pub use_demographics: bool,
    /// Leaky-ReLU negative-branch slope.
    pub alpha: f64,
    /// L2 coefficient over convolutional kernels and biases.
    pub rc: f64,
    /// Keep probabilities of the dropout after each FC layer.
    pub kp1: f64,
    pub kp2: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Simplified,
            norm: NormKind::Group,
            use_demographics: true,
            alpha: 0.01,
            rc: 0.001,
            kp1: 0.45,
            kp2: 0.5,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.rc >= 0.0) || !self.rc.is_finite() {
            return Err(Error::Config(format!(
                "rc must be finite and >= 0, got {}",
                self.rc
            )));
        }
        for (name, kp) in [("kp1", self.kp1), ("kp2", self.kp2)] {
            if !(kp > 0.0 && kp <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} must lie in (0, 1], got {kp}"
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

const CONV_CHANNELS: [usize; 3] = [32, 64, 128];
const POOL_WINDOWS: [usize; 3] = [2, 4, 4];
const POOL_STRIDE: usize = 2;
const KERNEL_EXTENT: usize = 3;
const FC_WIDTHS: [usize; 2] = [512, 128];
const DEMO_FEATURES: usize = 2;
const GROUP_NORM_GROUPS: usize = 8;

/// True for parameters the L2 penalty covers (convolutional kernels and
/// biases; FC layers rely on dropout instead).
pub fn conv_regularized(name: &str) -> bool {
    name.starts_with("conv")
}

/// One step of the computation, referring to its parameters by name.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 3³ same-padded stride-1 convolution; params `{name}.kernel/.bias`.
    Conv {
        name: String,
    },
    /// Params `{name}.gamma/.beta`; running statistics live beside them.
    BatchNorm {
        name: String,
    },
    GroupNorm {
        name: String,
        groups: usize,
    },
    LeakyRelu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    /// Params `{name}.weight/.bias`.
    Dense {
        name: String,
    },
    Dropout {
        keep_prob: f64,
    },
    ConcatDemographics,
}

/// A built network: configuration, layer order, named parameters, and the
/// per-layer output shapes (batch dimension omitted) fixed at build time.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    input_extents: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    params: ParamMap<T>,
    norm_states: BTreeMap<String, NormState<T>>,
    layer_output_shapes: Vec<Vec<usize>>,
}

/// Forward-pass intermediates needed by [`Model::backward`], one entry per
/// layer.
pub struct Tape<T: Scalar> {
    caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> Tape<T> {
    /// The dropout masks drawn during this pass, in layer order; feeding
    /// them to [`Model::forward_replay`] reproduces the pass exactly.
    pub fn dropout_masks(&self) -> Vec<&DropoutMask> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                LayerCache::Dropout { mask } => Some(mask),
                _ => None,
            })
            .collect()
    }
}

enum LayerCache<T: Scalar> {
    Conv { x: Tensor<T> },
    BatchNorm { cache: BatchNormCache<T> },
    GroupNorm { cache: GroupNormCache<T> },
    LeakyRelu { x: Tensor<T> },
    MaxPool { indices: PoolIndices },
    Flatten { input_shape: Vec<usize> },
    Dense { x: Tensor<T> },
    Dropout { mask: DropoutMask },
    Concat { features: usize },
}

enum Mode<'a> {
    Inference,
    Train {
        rng: &'a mut ChaCha8Rng,
    },
    /// Training-mode math with pre-drawn dropout masks and no running-stat
    /// updates; lets a finite-difference probe re-run a recorded pass.
    Replay {
        masks: &'a [DropoutMask],
    },
}

impl Mode<'_> {
    fn is_training(&self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

fn he_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand::Rng;
    let std = (2.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

/// Builds the configured architecture for the given input extents, drawing
/// initial weights (scaled normals, std √(2/fan_in)) from `rng` in layer
/// order — so two configs differing only past some layer share every draw
/// up to it. Biases start at zero, norm scales at one.
pub fn build_model<T: Scalar>(
    config: &ModelConfig,
    input_extents: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Model<T>> {
    config.validate()?;
    let mut layers = Vec::new();
    let mut params = ParamMap::new();
    let mut norm_states = BTreeMap::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();

    let mut spatial = [input_extents.0, input_extents.1, input_extents.2];
    if spatial.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArgument(format!(
            "input extents must be positive, got {input_extents:?}"
        )));
    }
    let mut channels = 1usize;
    let convs_per_block = match config.variant {
        Variant::Original => 2,
        Variant::Simplified => 1,
    };

    let record = |shapes: &mut Vec<Vec<usize>>, spatial: &[usize; 3], channels: usize| {
        shapes.push(vec![spatial[0], spatial[1], spatial[2], channels]);
    };

    let mut conv_index = 0;
    for (block, (&out_channels, &window)) in
        CONV_CHANNELS.iter().zip(POOL_WINDOWS.iter()).enumerate()
    {
        for _ in 0..convs_per_block {
            conv_index += 1;
            let name = format!("conv{conv_index}");
            let kshape = [
                KERNEL_EXTENT,
                KERNEL_EXTENT,
                KERNEL_EXTENT,
                channels,
                out_channels,
            ];
            let fan_in = KERNEL_EXTENT.pow(3) * channels;
            params.insert(format!("{name}.kernel"), he_tensor(&kshape, fan_in, rng));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
            layers.push(LayerSpec::Conv { name });
            channels = out_channels;
            record(&mut shapes, &spatial, channels);

            if config.norm != NormKind::None {
                let name = format!("norm{conv_index}");
                params.insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
                params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
                norm_states.insert(name.clone(), NormState::new(channels));
                layers.push(match config.norm {
                    NormKind::Batch => LayerSpec::BatchNorm { name },
                    NormKind::Group => LayerSpec::GroupNorm {
                        name,
                        groups: GROUP_NORM_GROUPS,
                    },
                    NormKind::None => unreachable!(),
                });
                record(&mut shapes, &spatial, channels);
            }

            layers.push(LayerSpec::LeakyRelu);
            record(&mut shapes, &spatial, channels);
        }

        if spatial.iter().any(|&e| e < 2) {
            return Err(Error::InvalidArgument(format!(
                "pool{}: input extents {:?} too small; every spatial extent must be >= 2",
                block + 1,
                (spatial[0], spatial[1], spatial[2]),
            )));
        }
        layers.push(LayerSpec::MaxPool {
            window,
            stride: POOL_STRIDE,
        });
        for e in spatial.iter_mut() {
            *e = e.div_ceil(POOL_STRIDE);
        }
        record(&mut shapes, &spatial, channels);
    }

    let mut features = spatial.iter().product::<usize>() * channels;
    layers.push(LayerSpec::Flatten);
    shapes.push(vec![features]);

    for (i, (&width, keep_prob)) in FC_WIDTHS.iter().zip([config.kp1, config.kp2]).enumerate() {
        let name = format!("fc{}", i + 1);
        params.insert(
            format!("{name}.weight"),
            he_tensor(&[features, width], features, rng),
        );
        params.insert(format!("{name}.bias"), Tensor::zeros(&[width]));
        layers.push(LayerSpec::Dense { name });
        features = width;
        shapes.push(vec![features]);

        layers.push(LayerSpec::LeakyRelu);
        shapes.push(vec![features]);
        layers.push(LayerSpec::Dropout { keep_prob });
        shapes.push(vec![features]);
    }

    if config.use_demographics {
        layers.push(LayerSpec::ConcatDemographics);
        features += DEMO_FEATURES;
        shapes.push(vec![features]);
    }

    params.insert(
        "out.weight".into(),
        he_tensor(&[features, config.num_classes], features, rng),
    );
    params.insert("out.bias".into(), Tensor::zeros(&[config.num_classes]));
    layers.push(LayerSpec::Dense { name: "out".into() });
    shapes.push(vec![config.num_classes]);

    Ok(Model {
        config: config.clone(),
        input_extents,
        layers,
        params,
        norm_states,
        layer_output_shapes: shapes,
    })
}

fn fetch<'p, T: Scalar>(params: &'p ParamMap<T>, name: &str) -> Result<&'p Tensor<T>> {
    params
        .get(name)
        .ok_or_else(|| Error::Data(format!("model is missing parameter {name}")))
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_extents(&self) -> (usize, usize, usize) {
        self.input_extents
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Declared output shape of each layer, batch dimension omitted.
    pub fn layer_output_shapes(&self) -> &[Vec<usize>] {
        &self.layer_output_shapes
    }

    pub fn params(&self) -> &ParamMap<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }

    /// Total scalar parameters across all layers.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            input_extents: self.input_extents,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            norm_states: self
                .norm_states
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            layer_output_shapes: self.layer_output_shapes.clone(),
        }
    }

    fn check_inputs(&self, volumes: &Tensor<T>, demographics: Option<&Tensor<T>>) -> Result<usize> {
        let shape = volumes.shape();
        if shape.len() != 5 || shape[4] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "volumes must be [N, X, Y, Z, 1], got {shape:?}"
            )));
        }
        let (x, y, z) = self.input_extents;
        if shape[1..4] != [x, y, z] {
            return Err(Error::ShapeMismatch(format!(
                "model was built for extents {:?}, volumes have {:?}",
                self.input_extents,
                (shape[1], shape[2], shape[3])
            )));
        }
        let n = shape[0];
        match (self.config.use_demographics, demographics) {
            (true, None) => Err(Error::InvalidArgument(
                "model fuses demographics but none were provided".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidArgument(
                "model ignores demographics but some were provided".into(),
            )),
            (true, Some(d)) if d.shape() != [n, DEMO_FEATURES] => {
                Err(Error::ShapeMismatch(format!(
                    "demographics must be [{n}, {DEMO_FEATURES}], got {:?}",
                    d.shape()
                )))
            }
            _ => Ok(n),
        }
    }

    fn walk(
        &self,
        norm_states: &mut BTreeMap<String, NormState<T>>,
        volumes: &Tensor<T>,
        demographics: Option<&Tensor<T>>,
        mut mode: Mode<'_>,
        want_tape: bool,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        self.check_inputs(volumes, demographics)?;
        let training = mode.is_training();
        let mut caches = Vec::with_capacity(if want_tape { self.layers.len() } else { 0 });
        let push = |c: LayerCache<T>, caches: &mut Vec<LayerCache<T>>| {
            if want_tape {
                caches.push(c);
            }
        };
        let mut replay_next = 0usize;
        let mut x = volumes.clone();
        for (spec, declared) in self.layers.iter().zip(&self.layer_output_shapes) {
            x = match spec {
                LayerSpec::Conv { name } => {
                    let kernel = fetch(&self.params, &format!("{name}.kernel"))?;
                    let bias = fetch(&self.params, &format!("{name}.bias"))?;
                    let y = conv3d(&x, kernel, bias, 1, Padding::Same)?;
                    push(LayerCache::Conv { x }, &mut caches);
                    y
                }
                LayerSpec::BatchNorm { name } => {
                    let gamma = fetch(&self.params, &format!("{name}.gamma"))?;
                    let beta = fetch(&self.params, &format!("{name}.beta"))?;
                    let state = norm_states
                        .get_mut(name)
                        .ok_or_else(|| Error::Data(format!("missing norm state {name}")))?;
                    let (y, cache) = batch_norm(&x, gamma, beta, state, training)?;
                    if let Some(cache) = cache {
                        push(LayerCache::BatchNorm { cache }, &mut caches);
                    } else if want_tape {
                        return Err(Error::Data(
                            "batch_norm produced no cache in training mode".into(),
                        ));
                    }
                    y
                }
                LayerSpec::GroupNorm { name, groups } => {
                    let gamma = fetch(&self.params, &format!("{name}.gamma"))?;
                    let beta = fetch(&self.params, &format!("{name}.beta"))?;
                    let (y, cache) = group_norm(&x, *groups, gamma, beta)?;
                    push(LayerCache::GroupNorm { cache }, &mut caches);
                    y
                }
                LayerSpec::LeakyRelu => {
                    let y = leaky_relu(&x, self.config.alpha);
                    push(LayerCache::LeakyRelu { x }, &mut caches);
                    y
                }
                LayerSpec::MaxPool { window, stride } => {
                    let (y, indices) = maxpool3d(&x, *window, *stride)?;
                    push(LayerCache::MaxPool { indices }, &mut caches);
                    y
                }
                LayerSpec::Flatten => {
                    let input_shape = x.shape().to_vec();
                    let n = input_shape[0];
                    let features: usize = input_shape[1..].iter().product();
                    let y = x.reshape(&[n, features])?;
                    push(LayerCache::Flatten { input_shape }, &mut caches);
                    y
                }
                LayerSpec::Dense { name } => {
                    let weight = fetch(&self.params, &format!("{name}.weight"))?;
                    let bias = fetch(&self.params, &format!("{name}.bias"))?;
                    let y = dense(&x, weight, bias)?;
                    push(LayerCache::Dense { x }, &mut caches);
                    y
                }
                LayerSpec::Dropout { keep_prob } => match &mut mode {
                    Mode::Inference => x,
                    Mode::Train { rng } => {
                        let mask = DropoutMask::sample(x.numel(), *keep_prob, rng)?;
                        let y = dropout_apply(&x, &mask)?;
                        push(LayerCache::Dropout { mask }, &mut caches);
                        y
                    }
                    Mode::Replay { masks } => {
                        let mask = masks.get(replay_next).ok_or_else(|| {
                            Error::InvalidArgument("replay is missing a dropout mask".into())
                        })?;
                        replay_next += 1;
                        let y = dropout_apply(&x, mask)?;
                        push(LayerCache::Dropout { mask: mask.clone() }, &mut caches);
                        y
                    }
                },
                LayerSpec::ConcatDemographics => {
                    let demo = demographics.expect("presence checked");
                    let n = x.shape()[0];
                    let features = x.shape()[1];
                    let mut data = Vec::with_capacity(n * (features + DEMO_FEATURES));
                    for row in 0..n {
                        data.extend_from_slice(&x.data()[row * features..(row + 1) * features]);
                        data.extend_from_slice(
                            &demo.data()[row * DEMO_FEATURES..(row + 1) * DEMO_FEATURES],
                        );
                    }
                    let y = Tensor::new(&[n, features + DEMO_FEATURES], data)?;
                    push(LayerCache::Concat { features }, &mut caches);
                    y
                }
            };
            debug_assert_eq!(
                &x.shape()[1..],
                declared.as_slice(),
                "layer {spec:?} produced an undeclared shape"
            );
        }
        if let Mode::Replay { masks } = &mode {
            if replay_next != masks.len() {
                return Err(Error::InvalidArgument(format!(
                    "replay got {} dropout masks, architecture has {replay_next}",
                    masks.len()
                )));
            }
        }
        Ok((x, want_tape.then_some(Tape { caches })))
    }

    /// Deterministic logits with dropout off and running norm statistics.
    pub fn forward_inference(
        &self,
        volumes: &Tensor<T>,
        demographics: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        // Inference never updates running statistics; operate on a scratch
        // copy so `self` can stay shared.
        let mut states = self.norm_states.clone();
        let (logits, _) = self.walk(&mut states, volumes, demographics, Mode::Inference, false)?;
        Ok(logits)
    }

    /// Training-mode logits plus the tape for [`Model::backward`]. Draws
    /// dropout masks from `rng` and updates running norm statistics.
    pub fn forward_training(
        &mut self,
        volumes: &Tensor<T>,
        demographics: Option<&Tensor<T>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let mut states = std::mem::take(&mut self.norm_states);
        let result = self.walk(
            &mut states,
            volumes,
            demographics,
            Mode::Train { rng },
            true,
        );
        self.norm_states = states;
        let (logits, tape) = result?;
        Ok((logits, tape.expect("tape requested")))
    }

    /// Re-runs a training-mode pass with the given dropout masks, without
    /// touching running statistics. With the masks from a recorded tape
    /// this reproduces that pass as a pure function of the parameters.
    pub fn forward_replay(
        &self,
        volumes: &Tensor<T>,
        demographics: Option<&Tensor<T>>,
        masks: &[DropoutMask],
    ) -> Result<Tensor<T>> {
        let mut states = self.norm_states.clone();
        let (logits, _) = self.walk(
            &mut states,
            volumes,
            demographics,
            Mode::Replay { masks },
            false,
        )?;
        Ok(logits)
    }

    /// Reverse pass: gradients of the scalar loss (whose logit gradient is
    /// `grad_logits`) with respect to every named parameter.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<ParamMap<T>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Data(format!(
                "tape has {} entries for {} layers",
                tape.caches.len(),
                self.layers.len()
            )));
        }
        let mut grads = ParamMap::new();
        let mut grad = grad_logits.clone();
        for (spec, cache) in self.layers.iter().zip(&tape.caches).rev() {
            grad = match (spec, cache) {
                (LayerSpec::Conv { name }, LayerCache::Conv { x }) => {
                    let kernel = fetch(&self.params, &format!("{name}.kernel"))?;
                    let (dx, g) = conv3d_backward(x, kernel, 1, Padding::Same, &grad)?;
                    grads.insert(format!("{name}.kernel"), g.kernel);
                    grads.insert(format!("{name}.bias"), g.bias);
                    dx
                }
                (LayerSpec::BatchNorm { name }, LayerCache::BatchNorm { cache }) => {
                    let gamma = fetch(&self.params, &format!("{name}.gamma"))?;
                    let (dx, dgamma, dbeta) = batch_norm_backward(cache, gamma, &grad)?;
                    grads.insert(format!("{name}.gamma"), dgamma);
                    grads.insert(format!("{name}.beta"), dbeta);
                    dx
                }
                (LayerSpec::GroupNorm { name, .. }, LayerCache::GroupNorm { cache }) => {
                    let gamma = fetch(&self.params, &format!("{name}.gamma"))?;
                    let (dx, dgamma, dbeta) = group_norm_backward(cache, gamma, &grad)?;
                    grads.insert(format!("{name}.gamma"), dgamma);
                    grads.insert(format!("{name}.beta"), dbeta);
                    dx
                }
                (LayerSpec::LeakyRelu, LayerCache::LeakyRelu { x }) => {
                    leaky_relu_backward(x, self.config.alpha, &grad)?
                }
                (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { indices }) => {
                    maxpool3d_backward(indices, &grad)?
                }
                (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => {
                    grad.reshape(input_shape)?
                }
                (LayerSpec::Dense { name }, LayerCache::Dense { x }) => {
                    let weight = fetch(&self.params, &format!("{name}.weight"))?;
                    let (dx, g) = dense_backward(x, weight, &grad)?;
                    grads.insert(format!("{name}.weight"), g.weight);
                    grads.insert(format!("{name}.bias"), g.bias);
                    dx
                }
                (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
                    dropout_backward(&grad, mask)?
                }
                (LayerSpec::ConcatDemographics, LayerCache::Concat { features }) => {
                    // Demographics are inputs, not parameters: keep only the
                    // upstream slice of each row.
                    let n = grad.shape()[0];
                    let wide = grad.shape()[1];
                    let mut data = Vec::with_capacity(n * features);
                    for row in 0..n {
                        data.extend_from_slice(&grad.data()[row * wide..row * wide + features]);
                    }
                    Tensor::new(&[n, *features], data)?
                }
                _ => {
                    return Err(Error::Data(
                        "tape entries do not match the architecture".into(),
                    ))
                }
            };
        }
        Ok(grads)
    }
}
