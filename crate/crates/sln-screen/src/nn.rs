//! The layer stack: configuration, weight initialization, batched
//! forward/backward passes, and class prediction.
//!
//! A `ModelConfig` lists the feature-extraction layers; the classifier
//! head (a plain dense layer of `class_count` units followed by softmax)
//! is appended automatically when the model is built, so configs never
//! spell it out. The default stack is 14 configured layers driven from a
//! 100x100x3 input.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DiagnosticCategory;
use crate::error::{Error, Result};
use crate::exec;
use crate::ops;
use crate::seeds;
use crate::tensor::{ConvSpec, Padding, Scalar, Tensor};

/// One entry of the configured stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    /// Fully connected layer. `flatten` folds a multi-axis input flat
    /// first; `relu` fuses the activation. Both default off.
    Dense {
        width: usize,
        #[serde(default)]
        relu: bool,
        #[serde(default)]
        flatten: bool,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }
}

fn conv3x3(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        kernel_h: 3,
        kernel_w: 3,
        in_channels,
        out_channels,
        stride: 1,
        padding: Padding::Same,
    })
}

/// Model description: input geometry, layer stack, class count, and the
/// seed the weights are initialized from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Conv/relu/pool blocks for each channel width, then a fused
    /// flatten+dense+relu layer and a dropout layer. The classifier head
    /// is appended at build time.
    pub fn stack(channels: &[usize], in_channels: usize, dense_width: usize, dropout: f64) -> Vec<LayerSpec> {
        let mut layers = Vec::with_capacity(3 * channels.len() + 2);
        let mut cin = in_channels;
        for &cout in channels {
            layers.push(conv3x3(cin, cout));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
            cin = cout;
        }
        layers.push(LayerSpec::Dense {
            width: dense_width,
            relu: true,
            flatten: true,
        });
        layers.push(LayerSpec::Dropout { rate: dropout });
        layers
    }

    /// Reduced-width variant of the default stack, for fast tests.
    pub fn with_input(input_shape: [usize; 3], channels: &[usize], dense_width: usize, dropout: f64, seed: u64) -> Self {
        ModelConfig {
            input_shape,
            layers: Self::stack(channels, input_shape[2], dense_width, dropout),
            class_count: 4,
            seed,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_input([100, 100, 3], &[16, 32, 64, 128], 256, 0.5, 17)
    }
}

enum Layer<T: Scalar> {
    Conv {
        spec: ConvSpec,
        kernels: Tensor<T>,
        bias: Tensor<T>,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Dense {
        weights: Tensor<T>,
        bias: Tensor<T>,
        relu: bool,
        flatten: bool,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

enum LayerTrace<T: Scalar> {
    Conv { input: Tensor<T> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Relu { input: Tensor<T> },
    Flatten { in_shape: Vec<usize> },
    Dense {
        input: Tensor<T>,
        in_shape: Vec<usize>,
        pre_relu: Option<Tensor<T>>,
    },
    Dropout { scales: Vec<T> },
    Softmax,
}

/// Dropout behaviour of a forward pass. `Train` draws per-sample masks
/// from seeds derived as mix(dropout_seed, sample index), so results do
/// not depend on thread scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Infer,
    Train { dropout_seed: u64 },
}

/// Samples per unit of parallel gradient accumulation. Fixed so that the
/// reduction tree (and therefore the floating-point result) is identical
/// for the sequential and parallel fronts.
const GRAD_CHUNK: usize = 4;

/// Scale on the classifier head's He-uniform init.
const HEAD_INIT_DAMPING: f64 = 0.1;

pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
    shape_chain: Vec<Vec<usize>>,
}

fn layer_err(index: usize, kind: &str, reason: impl Into<String>) -> Error {
    Error::InvalidLayer {
        index,
        kind: kind.to_string(),
        reason: reason.into(),
    }
}

/// Build and initialize a model from its config. Weights are He-uniform
/// from the config seed, biases zero; the shape chain is validated and
/// the first offending layer is named on failure.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    if config.class_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "class_count {} must be >= 2",
            config.class_count
        )));
    }
    if config.input_shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidConfig(format!(
            "input shape {:?} has a zero extent",
            config.input_shape
        )));
    }
    if let Some(LayerSpec::Softmax) = config.layers.last() {
        return Err(layer_err(
            config.layers.len() - 1,
            "softmax",
            "the classifier head appends softmax; remove the trailing softmax layer",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shape: Vec<usize> = config.input_shape.to_vec();
    let mut shape_chain = vec![shape.clone()];
    let mut layers: Vec<Layer<T>> = Vec::with_capacity(config.layers.len() + 2);

    let push_shape = |s: &Vec<usize>, chain: &mut Vec<Vec<usize>>| chain.push(s.clone());

    for (index, spec) in config.layers.iter().enumerate() {
        let kind = spec.kind_name();
        match spec {
            LayerSpec::Conv(cs) => {
                if shape.len() != 3 {
                    return Err(layer_err(index, kind, format!("expects HxWxC input, got {shape:?}")));
                }
                if shape[2] != cs.in_channels {
                    return Err(layer_err(
                        index,
                        kind,
                        format!("spec expects {} input channels, chain carries {}", cs.in_channels, shape[2]),
                    ));
                }
                let (oh, ow) = cs
                    .output_hw(shape[0], shape[1])
                    .map_err(|e| layer_err(index, kind, e.to_string()))?;
                let kernels = he_uniform(&mut rng, &cs.kernel_shape(), cs.kernel_h * cs.kernel_w * cs.in_channels);
                let bias = Tensor::zeros(&[cs.out_channels]);
                layers.push(Layer::Conv { spec: *cs, kernels, bias });
                shape = vec![oh, ow, cs.out_channels];
            }
            LayerSpec::MaxPool { window, stride } => {
                if shape.len() != 3 {
                    return Err(layer_err(index, kind, format!("expects HxWxC input, got {shape:?}")));
                }
                if *window == 0 || *stride == 0 {
                    return Err(layer_err(index, kind, "window and stride must be >= 1"));
                }
                if *window > shape[0] || *window > shape[1] {
                    return Err(layer_err(
                        index,
                        kind,
                        format!("window {window} exceeds input {}x{}", shape[0], shape[1]),
                    ));
                }
                layers.push(Layer::MaxPool { window: *window, stride: *stride });
                shape = vec![
                    (shape[0] - window) / stride + 1,
                    (shape[1] - window) / stride + 1,
                    shape[2],
                ];
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::Flatten => {
                if shape.len() < 2 {
                    return Err(layer_err(index, kind, format!("input {shape:?} is already flat")));
                }
                layers.push(Layer::Flatten);
                shape = vec![shape.iter().product()];
            }
            LayerSpec::Dense { width, relu, flatten } => {
                if *width == 0 {
                    return Err(layer_err(index, kind, "width must be >= 1"));
                }
                let in_len: usize = if *flatten {
                    shape.iter().product()
                } else if shape.len() == 1 {
                    shape[0]
                } else {
                    return Err(layer_err(
                        index,
                        kind,
                        format!("fed shape {shape:?} without a flatten"),
                    ));
                };
                let weights = he_uniform(&mut rng, &[in_len, *width], in_len);
                let bias = Tensor::zeros(&[*width]);
                layers.push(Layer::Dense {
                    weights,
                    bias,
                    relu: *relu,
                    flatten: *flatten,
                });
                shape = vec![*width];
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(layer_err(index, kind, format!("rate {rate} outside [0, 1)")));
                }
                layers.push(Layer::Dropout { rate: *rate });
            }
            LayerSpec::Softmax => {
                if shape.len() != 1 {
                    return Err(layer_err(index, kind, format!("expects a flat input, got {shape:?}")));
                }
                layers.push(Layer::Softmax);
            }
        }
        push_shape(&shape, &mut shape_chain);
    }

    // Classifier head: dense to class_count, then softmax. Its init is
    // damped so a fresh model's class probabilities start near uniform
    // instead of inheriting a fixed random bias from the head projection.
    if shape.len() != 1 {
        return Err(layer_err(
            config.layers.len(),
            "dense (classifier head)",
            format!("fed shape {shape:?} without a flatten"),
        ));
    }
    let in_len = shape[0];
    let mut weights = he_uniform::<T>(&mut rng, &[in_len, config.class_count], in_len);
    let damping = T::from_f64(HEAD_INIT_DAMPING);
    for w in weights.data_mut() {
        *w *= damping;
    }
    layers.push(Layer::Dense {
        weights,
        bias: Tensor::zeros(&[config.class_count]),
        relu: false,
        flatten: false,
    });
    shape = vec![config.class_count];
    push_shape(&shape, &mut shape_chain);
    layers.push(Layer::Softmax);
    push_shape(&shape, &mut shape_chain);

    Ok(Model {
        config: config.clone(),
        layers,
        shape_chain,
    })
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Number of configured layers (the classifier head is not counted).
    pub fn layer_count(&self) -> usize {
        self.config.layers.len()
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    /// Shapes flowing through the stack, input first, head output last.
    pub fn shape_chain(&self) -> &[Vec<usize>] {
        &self.shape_chain
    }

    /// Weight and bias tensors in stack order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { kernels, bias, .. } => {
                    out.push(kernels);
                    out.push(bias);
                }
                Layer::Dense { weights, bias, .. } => {
                    out.push(weights);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { kernels, bias, .. } => {
                    out.push(kernels);
                    out.push(bias);
                }
                Layer::Dense { weights, bias, .. } => {
                    out.push(weights);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameters concatenated in stack order.
    pub fn flat_params(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.param_count());
        for p in self.params() {
            flat.extend_from_slice(p.data());
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "set_flat_params".into(),
                left: format!("[{}]", flat.len()),
                right: format!("[{}]", self.param_count()),
            });
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Clone of every parameter tensor, for best-weights snapshots.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().cloned().collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        let params = self.params_mut();
        if snapshot.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "restore".into(),
                left: format!("[{}]", snapshot.len()),
                right: format!("[{}]", params.len()),
            });
        }
        for (p, s) in params.into_iter().zip(snapshot) {
            if p.shape() != s.shape() {
                return Err(Error::ShapeMismatch {
                    context: "restore".into(),
                    left: format!("{:?}", s.shape()),
                    right: format!("{:?}", p.shape()),
                });
            }
            p.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { spec, kernels, bias } => Layer::Conv {
                        spec: *spec,
                        kernels: kernels.cast(),
                        bias: bias.cast(),
                    },
                    Layer::MaxPool { window, stride } => Layer::MaxPool {
                        window: *window,
                        stride: *stride,
                    },
                    Layer::Relu => Layer::Relu,
                    Layer::Flatten => Layer::Flatten,
                    Layer::Dense { weights, bias, relu, flatten } => Layer::Dense {
                        weights: weights.cast(),
                        bias: bias.cast(),
                        relu: *relu,
                        flatten: *flatten,
                    },
                    Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                    Layer::Softmax => Layer::Softmax,
                })
                .collect(),
            shape_chain: self.shape_chain.clone(),
        }
    }

    fn check_sample_shape(&self, sample: &Tensor<T>) -> Result<()> {
        if sample.shape() != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                context: "forward input".into(),
                left: format!("{:?}", sample.shape()),
                right: format!("{:?}", self.config.input_shape),
            });
        }
        Ok(())
    }

    fn dropout_scales(&self, rate: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - rate));
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() >= rate {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    /// Forward one sample without keeping a trace.
    pub fn forward_sample(&self, sample: &Tensor<T>, dropout_seed: Option<u64>) -> Result<Tensor<T>> {
        self.check_sample_shape(sample)?;
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut x = sample.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { spec, kernels, bias } => ops::conv2d(&x, spec, kernels, bias)?,
                Layer::MaxPool { window, stride } => ops::maxpool2d(&x, *window, *stride)?.0,
                Layer::Relu => ops::relu(&x),
                Layer::Flatten => {
                    let len = x.len();
                    x.reshape(&[len])?
                }
                Layer::Dense { weights, bias, relu, flatten } => {
                    let flat = if *flatten {
                        let len = x.len();
                        x.reshape(&[len])?
                    } else {
                        x
                    };
                    let out = ops::dense(&flat, weights, bias)?;
                    if *relu {
                        ops::relu(&out)
                    } else {
                        out
                    }
                }
                Layer::Dropout { rate } => match rng.as_mut() {
                    Some(rng) => {
                        let scales = self.dropout_scales(*rate, x.len(), rng);
                        let data = x.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
                        Tensor::new(x.shape(), data)?
                    }
                    None => x,
                },
                Layer::Softmax => ops::softmax(&x),
            };
        }
        Ok(x)
    }

    fn forward_trace(
        &self,
        sample: &Tensor<T>,
        dropout_seed: Option<u64>,
    ) -> Result<(Vec<LayerTrace<T>>, Tensor<T>)> {
        self.check_sample_shape(sample)?;
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut x = sample.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv { spec, kernels, bias } => {
                    let out = ops::conv2d(&x, spec, kernels, bias)?;
                    traces.push(LayerTrace::Conv { input: x });
                    x = out;
                }
                Layer::MaxPool { window, stride } => {
                    let (out, argmax) = ops::maxpool2d(&x, *window, *stride)?;
                    traces.push(LayerTrace::MaxPool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    });
                    x = out;
                }
                Layer::Relu => {
                    let out = ops::relu(&x);
                    traces.push(LayerTrace::Relu { input: x });
                    x = out;
                }
                Layer::Flatten => {
                    let in_shape = x.shape().to_vec();
                    let len = x.len();
                    x = x.reshape(&[len])?;
                    traces.push(LayerTrace::Flatten { in_shape });
                }
                Layer::Dense { weights, bias, relu, flatten } => {
                    let in_shape = x.shape().to_vec();
                    let flat = if *flatten {
                        let len = x.len();
                        x.reshape(&[len])?
                    } else {
                        x
                    };
                    let pre = ops::dense(&flat, weights, bias)?;
                    let (out, pre_relu) = if *relu {
                        (ops::relu(&pre), Some(pre))
                    } else {
                        (pre, None)
                    };
                    traces.push(LayerTrace::Dense {
                        input: flat,
                        in_shape,
                        pre_relu,
                    });
                    x = out;
                }
                Layer::Dropout { rate } => match rng.as_mut() {
                    Some(rng) => {
                        let scales = self.dropout_scales(*rate, x.len(), rng);
                        let data = x.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
                        x = Tensor::new(x.shape(), data)?;
                        traces.push(LayerTrace::Dropout { scales });
                    }
                    None => traces.push(LayerTrace::Dropout {
                        scales: vec![T::one(); x.len()],
                    }),
                },
                Layer::Softmax => {
                    x = ops::softmax(&x);
                    traces.push(LayerTrace::Softmax);
                }
            }
        }
        Ok((traces, x))
    }

    /// Gradients of this sample's cross-entropy loss for every parameter,
    /// in stack order, plus the loss itself. The softmax/cross-entropy
    /// pair collapses to probs - onehot at the logits.
    fn backward_sample(
        &self,
        traces: &[LayerTrace<T>],
        probs: &Tensor<T>,
        target: usize,
    ) -> Result<(Vec<Tensor<T>>, T)> {
        let loss = ops::cross_entropy(probs, target)?;
        let mut grad = ops::softmax_cross_entropy_grad(probs, target)?;
        let mut rev_grads: Vec<Tensor<T>> = Vec::new();

        for (layer, trace) in self.layers.iter().zip(traces).rev() {
            match (layer, trace) {
                (Layer::Softmax, LayerTrace::Softmax) => {
                    // handled by the fused cross-entropy gradient
                }
                (Layer::Dense { weights, relu, flatten, .. }, LayerTrace::Dense { input, in_shape, pre_relu }) => {
                    if *relu {
                        let pre = pre_relu.as_ref().expect("relu trace");
                        grad = ops::relu_backward(pre, &grad)?;
                    }
                    let grads = ops::dense_backward(input, weights, &grad)?;
                    rev_grads.push(grads.bias);
                    rev_grads.push(grads.weights);
                    grad = if *flatten {
                        grads.input.reshape(in_shape)?
                    } else {
                        grads.input
                    };
                }
                (Layer::Dropout { .. }, LayerTrace::Dropout { scales }) => {
                    let data = grad.data().iter().zip(scales).map(|(&g, &s)| g * s).collect();
                    grad = Tensor::new(grad.shape(), data)?;
                }
                (Layer::Flatten, LayerTrace::Flatten { in_shape }) => {
                    grad = grad.reshape(in_shape)?;
                }
                (Layer::Relu, LayerTrace::Relu { input }) => {
                    grad = ops::relu_backward(input, &grad)?;
                }
                (Layer::MaxPool { .. }, LayerTrace::MaxPool { argmax, in_shape }) => {
                    grad = ops::maxpool2d_backward(argmax, &grad, in_shape)?;
                }
                (Layer::Conv { spec, kernels, .. }, LayerTrace::Conv { input }) => {
                    let grads = ops::conv2d_backward(input, spec, kernels, &grad)?;
                    rev_grads.push(grads.bias);
                    rev_grads.push(grads.kernels);
                    grad = grads.input;
                }
                _ => unreachable!("trace misaligned with layer stack"),
            }
        }
        rev_grads.reverse();
        Ok((rev_grads, loss))
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let want = self.config.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != want {
            return Err(Error::ShapeMismatch {
                context: "batch input".into(),
                left: format!("{:?}", batch.shape()),
                right: format!("[B, {}, {}, {}]", want[0], want[1], want[2]),
            });
        }
        Ok(batch.shape()[0])
    }

    fn sample_of_batch(&self, batch: &Tensor<T>, i: usize) -> Tensor<T> {
        let sample_len: usize = self.config.input_shape.iter().product();
        let data = batch.data()[i * sample_len..(i + 1) * sample_len].to_vec();
        Tensor::new(&self.config.input_shape, data).expect("batch slice")
    }

    fn forward_batch_impl(&self, batch: &Tensor<T>, mode: ForwardMode, parallel: bool) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        let k = self.config.class_count;
        let run = |i: usize| -> Result<Vec<T>> {
            let sample = self.sample_of_batch(batch, i);
            let seed = match mode {
                ForwardMode::Infer => None,
                ForwardMode::Train { dropout_seed } => Some(seeds::mix(dropout_seed, i as u64)),
            };
            Ok(self.forward_sample(&sample, seed)?.into_data())
        };
        let rows = if parallel {
            exec::map_indexed(b, run)
        } else {
            exec::map_indexed_seq(b, run)
        };
        let mut out = Vec::with_capacity(b * k);
        for row in rows {
            out.extend(row?);
        }
        Tensor::new(&[b, k], out)
    }

    /// Forward a batch to per-sample class probabilities (each row sums
    /// to 1). Parallel across samples when the `parallel` feature is on.
    pub fn forward_batch(&self, batch: &Tensor<T>, mode: ForwardMode) -> Result<Tensor<T>> {
        self.forward_batch_impl(batch, mode, true)
    }

    /// Sequential twin of [`Model::forward_batch`].
    pub fn forward_batch_seq(&self, batch: &Tensor<T>, mode: ForwardMode) -> Result<Tensor<T>> {
        self.forward_batch_impl(batch, mode, false)
    }

    fn backward_batch_impl(
        &self,
        batch: &Tensor<T>,
        targets: &[usize],
        dropout_seed: Option<u64>,
        parallel: bool,
    ) -> Result<(Vec<Tensor<T>>, T)> {
        let b = self.check_batch(batch)?;
        if targets.len() != b {
            return Err(Error::ShapeMismatch {
                context: "targets vs batch".into(),
                left: format!("[{}]", targets.len()),
                right: format!("[{b}]"),
            });
        }
        for &t in targets {
            if t >= self.config.class_count {
                return Err(Error::TargetOutOfRange {
                    target: t,
                    classes: self.config.class_count,
                });
            }
        }

        let chunks = b.div_ceil(GRAD_CHUNK);
        let run = |chunk: usize| -> Result<(Vec<Tensor<T>>, T)> {
            let lo = chunk * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(b);
            let mut acc = self.zero_grads();
            let mut loss_sum = T::zero();
            for i in lo..hi {
                let sample = self.sample_of_batch(batch, i);
                let seed = dropout_seed.map(|s| seeds::mix(s, i as u64));
                let (traces, probs) = self.forward_trace(&sample, seed)?;
                let (grads, loss) = self.backward_sample(&traces, &probs, targets[i])?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += *gv;
                    }
                }
                loss_sum += loss;
            }
            Ok((acc, loss_sum))
        };

        let partials = if parallel {
            exec::map_indexed(chunks, run)
        } else {
            exec::map_indexed_seq(chunks, run)
        };

        let mut total = self.zero_grads();
        let mut loss_total = T::zero();
        for partial in partials {
            let (grads, loss) = partial?;
            for (t, g) in total.iter_mut().zip(&grads) {
                for (tv, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *tv += *gv;
                }
            }
            loss_total += loss;
        }
        let inv = T::one() / T::from_f64(b as f64);
        for t in &mut total {
            for v in t.data_mut() {
                *v *= inv;
            }
        }
        Ok((total, loss_total * inv))
    }

    /// Mean cross-entropy loss over the batch and its gradient for every
    /// parameter. Per-sample work runs in fixed-size chunks that are
    /// reduced in order, so the result is identical across thread counts
    /// and across the sequential/parallel fronts.
    pub fn backward_batch(
        &self,
        batch: &Tensor<T>,
        targets: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<(Vec<Tensor<T>>, T)> {
        self.backward_batch_impl(batch, targets, dropout_seed, true)
    }

    /// Sequential twin of [`Model::backward_batch`].
    pub fn backward_batch_seq(
        &self,
        batch: &Tensor<T>,
        targets: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<(Vec<Tensor<T>>, T)> {
        self.backward_batch_impl(batch, targets, dropout_seed, false)
    }

    /// Argmax category for one patch; ties break toward the lowest code.
    pub fn predict(&self, patch: &Tensor<T>) -> Result<DiagnosticCategory> {
        if self.config.class_count != DiagnosticCategory::COUNT {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} classes, diagnostic prediction needs {}",
                self.config.class_count,
                DiagnosticCategory::COUNT
            )));
        }
        let probs = self.forward_sample(patch, None)?;
        Ok(DiagnosticCategory::from_scores(probs.data()))
    }

    /// Smallest decision margin along the forward pass: min |relu input|
    /// and min max-pool runner-up gap. Finite differencing is unreliable
    /// when a perturbation can cross one of these boundaries, so gradient
    /// checks resample inputs until the margin is comfortable.
    pub fn decision_margin(&self, sample: &Tensor<T>) -> Result<f64> {
        let (traces, _) = self.forward_trace(sample, None)?;
        let mut margin = f64::INFINITY;
        for trace in &traces {
            match trace {
                LayerTrace::Relu { input } => {
                    for &v in input.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                LayerTrace::Dense { pre_relu: Some(pre), .. } => {
                    for &v in pre.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                LayerTrace::MaxPool { .. } => {
                    // runner-up gaps are handled below via a second pass
                }
                _ => {}
            }
        }
        // Max-pool runner-up gaps need window contents; recompute layer by
        // layer rather than storing full inputs in the trace.
        let mut x = sample.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv { spec, kernels, bias } => x = ops::conv2d(&x, spec, kernels, bias)?,
                Layer::MaxPool { window, stride } => {
                    margin = margin.min(pool_runner_up_gap(&x, *window, *stride));
                    x = ops::maxpool2d(&x, *window, *stride)?.0;
                }
                Layer::Relu => x = ops::relu(&x),
                Layer::Flatten => {
                    let len = x.len();
                    x = x.reshape(&[len])?;
                }
                Layer::Dense { weights, bias, relu, flatten } => {
                    let flat = if *flatten {
                        let len = x.len();
                        x.reshape(&[len])?
                    } else {
                        x
                    };
                    let out = ops::dense(&flat, weights, bias)?;
                    x = if *relu { ops::relu(&out) } else { out };
                }
                Layer::Dropout { .. } => {}
                Layer::Softmax => x = ops::softmax(&x),
            }
        }
        Ok(margin)
    }
}

fn pool_runner_up_gap<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> f64 {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let data = input.data();
    let mut gap = f64::INFINITY;
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ((oy * stride + ky) * w + (ox * stride + kx)) * c + ch;
                        let v = data[idx].as_f64();
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if second.is_finite() {
                    gap = gap.min(best - second);
                }
            }
        }
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig::with_input([12, 12, 3], &[4, 8], 16, 0.0, seed)
    }

    fn random_patch(shape: [usize; 3], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&shape, |_| (rng.next_u32() as f32 / u32::MAX as f32))
    }

    #[test]
    fn default_config_has_14_layers() {
        assert_eq!(ModelConfig::default().layers.len(), 14);
    }

    #[test]
    fn default_shape_chain_is_forced() {
        let model: Model<f32> = build_model(&ModelConfig::default()).unwrap();
        let chain = model.shape_chain();
        assert_eq!(chain[0], vec![100, 100, 3]);
        // after each conv/relu/pool block
        assert_eq!(chain[3], vec![50, 50, 16]);
        assert_eq!(chain[6], vec![25, 25, 32]);
        assert_eq!(chain[9], vec![12, 12, 64]);
        assert_eq!(chain[12], vec![6, 6, 128]);
        // fused flatten+dense, dropout, then the head
        assert_eq!(chain[13], vec![256]);
        assert_eq!(chain[14], vec![256]);
        assert_eq!(chain[15], vec![4]);
        assert_eq!(*chain.last().unwrap(), vec![4]);
    }

    #[test]
    fn dense_without_flatten_is_rejected() {
        let config = ModelConfig {
            input_shape: [8, 8, 2],
            layers: vec![LayerSpec::Dense {
                width: 4,
                relu: false,
                flatten: false,
            }],
            class_count: 4,
            seed: 1,
        };
        let err = build_model::<f32>(&config).err().unwrap();
        match err {
            Error::InvalidLayer { index, ref kind, ref reason } => {
                assert_eq!(index, 0);
                assert_eq!(kind, "dense");
                assert!(reason.contains("without a flatten"), "{reason}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn inconsistent_conv_channels_name_the_layer() {
        let mut config = tiny_config(3);
        config.layers[0] = conv3x3(5, 4); // input has 3 channels
        let err = build_model::<f32>(&config).err().unwrap();
        assert!(err.to_string().starts_with("layer 0 (conv)"), "{err}");
    }

    #[test]
    fn trailing_softmax_is_rejected() {
        let mut config = tiny_config(3);
        config.layers.push(LayerSpec::Softmax);
        assert!(build_model::<f32>(&config).is_err());
    }

    #[test]
    fn forward_batch_rows_sum_to_one() {
        let model: Model<f32> = build_model(&tiny_config(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Tensor::from_fn(&[3, 12, 12, 3], |_| rng.next_u32() as f32 / u32::MAX as f32);
        let probs = model.forward_batch(&batch, ForwardMode::Infer).unwrap();
        assert_eq!(probs.shape(), &[3, 4]);
        for row in probs.data().chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn infer_forward_is_deterministic() {
        let model: Model<f32> = build_model(&tiny_config(7)).unwrap();
        let batch = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Tensor::from_fn(&[2, 12, 12, 3], |_| rng.next_u32() as f32 / u32::MAX as f32)
        };
        let a = model.forward_batch(&batch, ForwardMode::Infer).unwrap();
        let b = model.forward_batch(&batch, ForwardMode::Infer).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn parallel_and_sequential_batch_ops_agree_bitwise() {
        let config = ModelConfig::with_input([12, 12, 3], &[4, 8], 16, 0.5, 21);
        let model: Model<f32> = build_model(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = Tensor::from_fn(&[6, 12, 12, 3], |_| rng.next_u32() as f32 / u32::MAX as f32);
        let targets = [0usize, 1, 2, 3, 1, 2];

        let fp = model.forward_batch(&batch, ForwardMode::Train { dropout_seed: 99 }).unwrap();
        let fs = model.forward_batch_seq(&batch, ForwardMode::Train { dropout_seed: 99 }).unwrap();
        assert_eq!(fp.data(), fs.data());

        let (gp, lp) = model.backward_batch(&batch, &targets, Some(99)).unwrap();
        let (gs, ls) = model.backward_batch_seq(&batch, &targets, Some(99)).unwrap();
        assert_eq!(lp, ls);
        for (a, b) in gp.iter().zip(&gs) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn duplicated_sample_gradient_matches_single() {
        let model: Model<f32> = build_model(&tiny_config(31)).unwrap();
        let patch = random_patch([12, 12, 3], 5);
        let single = Tensor::new(&[1, 12, 12, 3], patch.data().to_vec()).unwrap();
        let double = {
            let mut data = patch.data().to_vec();
            data.extend_from_slice(patch.data());
            Tensor::new(&[2, 12, 12, 3], data).unwrap()
        };
        let (g1, l1) = model.backward_batch(&single, &[2], None).unwrap();
        let (g2, l2) = model.backward_batch(&double, &[2, 2], None).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let model: Model<f32> = build_model(&tiny_config(33)).unwrap();
        let batch = Tensor::zeros(&[1, 12, 12, 3]);
        assert!(matches!(
            model.backward_batch(&batch, &[4], None),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn untrained_model_probabilities_are_near_uniform() {
        let model: Model<f32> = build_model(&ModelConfig::default()).unwrap();
        let n = 256;
        let mut sums = [0.0f64; 4];
        for s in 0..n {
            let patch = random_patch([100, 100, 3], 1000 + s as u64);
            let probs = model.forward_sample(&patch, None).unwrap();
            for (acc, &p) in sums.iter_mut().zip(probs.data()) {
                *acc += p as f64;
            }
        }
        for acc in sums {
            let mean = acc / n as f64;
            assert!((mean - 0.25).abs() <= 0.15, "class mean {mean}");
        }
    }

    #[test]
    fn one_sgd_step_decreases_single_sample_loss() {
        use crate::optim::{apply_update, OptimizerConfig, OptimizerKind, OptimizerState};
        let lr = 1e-4;
        for seed in 0..20u64 {
            let mut model: Model<f32> = build_model(&tiny_config(300 + seed)).unwrap();
            let patch = random_patch([12, 12, 3], 600 + seed);
            let batch = Tensor::new(&[1, 12, 12, 3], patch.data().to_vec()).unwrap();
            let target = [(seed % 4) as usize];

            let (grads, loss_before) = model.backward_batch(&batch, &target, None).unwrap();
            let mut state = OptimizerState::new(&model);
            let cfg = OptimizerConfig {
                kind: OptimizerKind::Sgd,
                learning_rate: lr,
            };
            apply_update(&mut model, &grads, &mut state, &cfg).unwrap();
            let (_, loss_after) = model.backward_batch(&batch, &target, None).unwrap();
            assert!(
                loss_after < loss_before,
                "seed {seed}: loss {loss_before} -> {loss_after}"
            );
        }
    }

    #[test]
    fn prediction_tie_breaks_to_lowest_code() {
        assert_eq!(
            DiagnosticCategory::from_scores(&[0.1f32, 0.2, 0.6, 0.1]),
            DiagnosticCategory::Micrometastasis
        );
        assert_eq!(
            DiagnosticCategory::from_scores(&[0.25f32, 0.25, 0.25, 0.25]),
            DiagnosticCategory::Negative
        );
    }
}
