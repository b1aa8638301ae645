//! The eight-layer network: architecture description, parameter storage and
//! initialization, the forward pass with full trace, the backward pass, and
//! binary model serialization.
//!
//! The reference architecture takes one 78x78 map through
//! `C(7,6) P(2) C(4,16) P(3) C(3,32) P(3) F(150) OUT(n)`, giving the stage
//! chain 6@72x72, 6@36x36, 16@33x33, 16@11x11, 32@9x9, 32@3x3, 150, n and
//! 50,748 trainable scalars for n = 6.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::GrayImage;
use crate::numerics::{
    self, activation, activation_derivative, softmax, FeatureStack, FilterGrid, Map2D, PoolTrace,
};

/// One layer of the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Valid convolution with square `filter_size` filters producing
    /// `output_maps` maps, followed by the scaled-tanh activation.
    Convolution {
        filter_size: usize,
        output_maps: usize,
    },
    /// Non-overlapping max-pooling over `region x region` blocks.
    MaxPool { region: usize },
    /// Fully-connected layer with the scaled-tanh activation.
    FullyConnected { neurons: usize },
    /// Final fully-connected layer producing `classes` logits and softmax
    /// probabilities.
    SoftmaxOutput { classes: usize },
}

/// Architecture description: a square single-map input plus the layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shape of the data between layers while validating a spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageShape {
    Maps {
        maps: usize,
        height: usize,
        width: usize,
    },
    Vector {
        length: usize,
    },
}

impl NetworkSpec {
    /// The reference architecture for a given class count.
    pub fn reference(classes: usize) -> Self {
        NetworkSpec {
            input_size: 78,
            layers: vec![
                LayerSpec::Convolution {
                    filter_size: 7,
                    output_maps: 6,
                },
                LayerSpec::MaxPool { region: 2 },
                LayerSpec::Convolution {
                    filter_size: 4,
                    output_maps: 16,
                },
                LayerSpec::MaxPool { region: 3 },
                LayerSpec::Convolution {
                    filter_size: 3,
                    output_maps: 32,
                },
                LayerSpec::MaxPool { region: 3 },
                LayerSpec::FullyConnected { neurons: 150 },
                LayerSpec::SoftmaxOutput { classes },
            ],
        }
    }

    /// An 18x18-input scale model of the reference architecture, small enough
    /// for whole-network finite-difference checks.
    pub fn reduced() -> Self {
        NetworkSpec {
            input_size: 18,
            layers: vec![
                LayerSpec::Convolution {
                    filter_size: 3,
                    output_maps: 2,
                },
                LayerSpec::MaxPool { region: 2 },
                LayerSpec::Convolution {
                    filter_size: 3,
                    output_maps: 3,
                },
                LayerSpec::MaxPool { region: 2 },
                LayerSpec::Convolution {
                    filter_size: 2,
                    output_maps: 4,
                },
                LayerSpec::MaxPool { region: 2 },
                LayerSpec::FullyConnected { neurons: 10 },
                LayerSpec::SoftmaxOutput { classes: 3 },
            ],
        }
    }

    /// Walks the layer list and returns the shape after every layer.
    /// Rejects inconsistent chains, naming the failing layer.
    pub fn validate(&self) -> Result<Vec<StageShape>> {
        if self.input_size == 0 {
            return Err(Error::InvalidSpec {
                layer: 0,
                reason: "input size must be positive".into(),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec {
                layer: 0,
                reason: "layer list is empty".into(),
            });
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = StageShape::Maps {
            maps: 1,
            height: self.input_size,
            width: self.input_size,
        };
        let mut seen_vector = false;
        for (index, layer) in self.layers.iter().enumerate() {
            current = match (*layer, current) {
                (
                    LayerSpec::Convolution {
                        filter_size,
                        output_maps,
                    },
                    StageShape::Maps { height, width, .. },
                ) => {
                    if filter_size == 0 || output_maps == 0 {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: "convolution needs positive filter size and map count".into(),
                        });
                    }
                    if filter_size > height || filter_size > width {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: format!(
                                "filter {filter_size} exceeds input {height}x{width}"
                            ),
                        });
                    }
                    StageShape::Maps {
                        maps: output_maps,
                        height: height - filter_size + 1,
                        width: width - filter_size + 1,
                    }
                }
                (
                    LayerSpec::MaxPool { region },
                    StageShape::Maps {
                        maps,
                        height,
                        width,
                    },
                ) => {
                    if region == 0 {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: "pool region must be positive".into(),
                        });
                    }
                    if region > height || region > width {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: format!("pool region {region} exceeds input {height}x{width}"),
                        });
                    }
                    StageShape::Maps {
                        maps,
                        height: height / region,
                        width: width / region,
                    }
                }
                (LayerSpec::FullyConnected { neurons }, shape) => {
                    if neurons == 0 {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: "fully-connected layer needs at least one neuron".into(),
                        });
                    }
                    seen_vector = true;
                    let _ = shape;
                    StageShape::Vector { length: neurons }
                }
                (LayerSpec::SoftmaxOutput { classes }, shape) => {
                    if classes == 0 {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: "output layer needs at least one class".into(),
                        });
                    }
                    if index + 1 != self.layers.len() {
                        return Err(Error::InvalidSpec {
                            layer: index,
                            reason: "softmax output must be the final layer".into(),
                        });
                    }
                    seen_vector = true;
                    let _ = shape;
                    StageShape::Vector { length: classes }
                }
                (LayerSpec::Convolution { .. } | LayerSpec::MaxPool { .. }, StageShape::Vector { .. }) => {
                    return Err(Error::InvalidSpec {
                        layer: index,
                        reason: "map-shaped layer after a fully-connected layer".into(),
                    });
                }
            };
            // Convolution or pooling after flattening is caught above; a
            // fully-connected layer can follow maps (it flattens them).
            let _ = seen_vector;
            shapes.push(current);
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { .. }) => Ok(shapes),
            _ => Err(Error::InvalidSpec {
                layer: self.layers.len() - 1,
                reason: "network must end with a softmax output layer".into(),
            }),
        }
    }

    /// Class count of the final layer, if the spec is well formed.
    pub fn class_count(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { classes }) => Ok(*classes),
            _ => Err(Error::InvalidSpec {
                layer: self.layers.len().saturating_sub(1),
                reason: "network must end with a softmax output layer".into(),
            }),
        }
    }

    /// Vector length feeding each trainable layer, in network order:
    /// `(fan_in, scalar counts)` used by init and the parameter count.
    fn trainable_dims(&self) -> Result<Vec<TrainableDims>> {
        let shapes = self.validate()?;
        let mut dims = Vec::new();
        let mut maps_in = 1usize;
        let mut flat_in = self.input_size * self.input_size;
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Convolution {
                    filter_size,
                    output_maps,
                } => {
                    dims.push(TrainableDims::Conv {
                        input_maps: maps_in,
                        output_maps: *output_maps,
                        filter_size: *filter_size,
                    });
                }
                LayerSpec::FullyConnected { neurons } => {
                    dims.push(TrainableDims::Dense {
                        inputs: flat_in,
                        outputs: *neurons,
                    });
                }
                LayerSpec::SoftmaxOutput { classes } => {
                    dims.push(TrainableDims::Dense {
                        inputs: flat_in,
                        outputs: *classes,
                    });
                }
                LayerSpec::MaxPool { .. } => {}
            }
            match shape {
                StageShape::Maps {
                    maps,
                    height,
                    width,
                } => {
                    maps_in = *maps;
                    flat_in = maps * height * width;
                }
                StageShape::Vector { length } => {
                    flat_in = *length;
                }
            }
        }
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy)]
enum TrainableDims {
    Conv {
        input_maps: usize,
        output_maps: usize,
        filter_size: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

/// Parameters (or same-shaped gradients/velocities) of one trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        filters: FilterGrid,
        biases: Vec<f64>,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        /// Row-major `outputs x inputs`.
        weights: Vec<f64>,
        biases: Vec<f64>,
    },
}

/// All trainable tensors of a network, ordered like the trainable layers in
/// the spec. The same container is reused for gradients and momentum
/// velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

/// Distinguishes weight tensors (subject to decay) from bias tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
}

impl NetworkParams {
    fn zeros_for(dims: &[TrainableDims]) -> NetworkParams {
        let layers = dims
            .iter()
            .map(|d| match *d {
                TrainableDims::Conv {
                    input_maps,
                    output_maps,
                    filter_size,
                } => LayerParams::Conv {
                    filters: FilterGrid::zeros(input_maps, output_maps, filter_size),
                    biases: vec![0.0; output_maps],
                },
                TrainableDims::Dense { inputs, outputs } => LayerParams::Dense {
                    inputs,
                    outputs,
                    weights: vec![0.0; inputs * outputs],
                    biases: vec![0.0; outputs],
                },
            })
            .collect();
        NetworkParams { layers }
    }

    /// A zero-valued copy with the same shapes (for gradients/velocities).
    pub fn zeros_like(&self) -> NetworkParams {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Conv { filters, biases } => LayerParams::Conv {
                    filters: FilterGrid::zeros(
                        filters.input_maps(),
                        filters.output_maps(),
                        filters.size(),
                    ),
                    biases: vec![0.0; biases.len()],
                },
                LayerParams::Dense {
                    inputs,
                    outputs,
                    weights,
                    biases,
                } => LayerParams::Dense {
                    inputs: *inputs,
                    outputs: *outputs,
                    weights: vec![0.0; weights.len()],
                    biases: vec![0.0; biases.len()],
                },
            })
            .collect();
        NetworkParams { layers }
    }

    /// Flat views of every tensor, in the fixed serialization order:
    /// per trainable layer, weights first (conv filters input-map-major),
    /// then biases.
    pub fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Conv { filters, biases } => {
                    for f in filters.filters() {
                        out.push((TensorRole::Weight, f.values()));
                    }
                    out.push((TensorRole::Bias, biases.as_slice()));
                }
                LayerParams::Dense {
                    weights, biases, ..
                } => {
                    out.push((TensorRole::Weight, weights.as_slice()));
                    out.push((TensorRole::Bias, biases.as_slice()));
                }
            }
        }
        out
    }

    /// Mutable flat views in the same order as [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Conv { filters, biases } => {
                    for f in filters.filters_mut() {
                        out.push((TensorRole::Weight, f.values_mut()));
                    }
                    out.push((TensorRole::Bias, biases.as_mut_slice()));
                }
                LayerParams::Dense {
                    weights, biases, ..
                } => {
                    out.push((TensorRole::Weight, weights.as_mut_slice()));
                    out.push((TensorRole::Bias, biases.as_mut_slice()));
                }
            }
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, element-wise across every tensor.
    pub fn add_in_place(&mut self, other: &NetworkParams) -> Result<()> {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::ShapeMismatch {
                axis: "parameter tensors",
                expected: mine.len(),
                actual: theirs.len(),
            });
        }
        for ((_, a), (_, b)) in mine.iter_mut().zip(&theirs) {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch {
                    axis: "parameter tensor length",
                    expected: a.len(),
                    actual: b.len(),
                });
            }
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Multiplies every scalar by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }
}

/// Exact count of trainable scalars for a spec.
pub fn param_count(spec: &NetworkSpec) -> Result<usize> {
    let dims = spec.trainable_dims()?;
    Ok(dims
        .iter()
        .map(|d| match *d {
            TrainableDims::Conv {
                input_maps,
                output_maps,
                filter_size,
            } => input_maps * output_maps * filter_size * filter_size + output_maps,
            TrainableDims::Dense { inputs, outputs } => inputs * outputs + outputs,
        })
        .sum())
}

/// Initializes parameters: weights uniform on `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
/// (fan_in = incoming connections per unit), biases zero. Deterministic for a
/// given seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    let dims = spec.trainable_dims()?;
    let mut params = NetworkParams::zeros_for(&dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (layer, d) in params.layers.iter_mut().zip(&dims) {
        let fan_in = match *d {
            TrainableDims::Conv {
                input_maps,
                filter_size,
                ..
            } => input_maps * filter_size * filter_size,
            TrainableDims::Dense { inputs, .. } => inputs,
        };
        let half_width = 1.0 / (fan_in as f64).sqrt();
        match layer {
            LayerParams::Conv { filters, .. } => {
                for f in filters.filters_mut() {
                    for v in f.values_mut() {
                        *v = rng.random_range(-half_width..half_width);
                    }
                }
            }
            LayerParams::Dense { weights, .. } => {
                for v in weights.iter_mut() {
                    *v = rng.random_range(-half_width..half_width);
                }
            }
        }
    }
    Ok(params)
}

/// Dropout applied to the first fully-connected layer's activations during
/// training. Ratio 0 disables it entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub ratio: f64,
}

impl DropoutConfig {
    pub fn disabled() -> Self {
        DropoutConfig { ratio: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) || !self.ratio.is_finite() {
            return Err(Error::Config(format!(
                "dropout ratio must lie in [0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Train-time behaviour differences (dropout) are keyed off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trace of one convolution-plus-activation or pooling stage.
#[derive(Debug, Clone)]
pub enum StageTrace {
    Conv {
        input: FeatureStack,
        pre_activation: FeatureStack,
        activated: FeatureStack,
    },
    Pool {
        trace: PoolTrace,
        output: FeatureStack,
    },
}

impl StageTrace {
    /// Shape of this stage's output, for structural checks.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        match self {
            StageTrace::Conv { activated, .. } => {
                (activated.len(), activated.height(), activated.width())
            }
            StageTrace::Pool { output, .. } => (output.len(), output.height(), output.width()),
        }
    }
}

/// Dropout mask recorded during a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct DropoutTrace {
    /// True = kept (and scaled), false = zeroed.
    pub kept: Vec<bool>,
    /// `1 / (1 - ratio)` applied to survivors.
    pub keep_scale: f64,
}

/// Trace of one fully-connected stage.
#[derive(Debug, Clone)]
pub struct FcTrace {
    /// The layer's input vector.
    pub input: Vec<f64>,
    /// Pre-activation `W x + b`.
    pub pre_activation: Vec<f64>,
    /// Post-activation.
    pub activated: Vec<f64>,
    /// Present when dropout was applied to this layer.
    pub dropout: Option<DropoutTrace>,
    /// What the next layer saw (post-dropout).
    pub output: Vec<f64>,
}

/// Everything recorded by a forward pass, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
    /// Flattened feature vector entering the first fully-connected layer
    /// (map-major, then row, then column).
    pub flattened: Vec<f64>,
    pub fully_connected: Vec<FcTrace>,
    /// Output-layer input vector.
    pub output_input: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mode: Mode,
}

fn dense_forward(
    weights: &[f64],
    biases: &[f64],
    inputs: usize,
    outputs: usize,
    x: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(x.len(), inputs);
    let mut out = Vec::with_capacity(outputs);
    for o in 0..outputs {
        let row = &weights[o * inputs..(o + 1) * inputs];
        let mut acc = biases[o];
        for (&w, &v) in row.iter().zip(x) {
            acc += w * v;
        }
        out.push(acc);
    }
    out
}

/// `W^T d` for a row-major `outputs x inputs` matrix.
fn dense_backward_input(weights: &[f64], inputs: usize, outputs: usize, d: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; inputs];
    for o in 0..outputs {
        let row = &weights[o * inputs..(o + 1) * inputs];
        let g = d[o];
        for (acc, &w) in out.iter_mut().zip(row) {
            *acc += g * w;
        }
    }
    out
}

/// Runs the network on a preprocessed square image and records the full
/// trace. In train mode, dropout zeroes a Bernoulli(ratio) subset of the
/// first fully-connected layer's activations and scales survivors by
/// `1/(1-ratio)`; eval mode applies no dropout and needs no rescaling.
pub fn forward(
    params: &NetworkParams,
    spec: &NetworkSpec,
    image: &GrayImage,
    dropout: &DropoutConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ForwardTrace> {
    dropout.validate()?;
    if image.height() != spec.input_size || image.width() != spec.input_size {
        return Err(Error::ShapeMismatch {
            axis: "input image size",
            expected: spec.input_size,
            actual: image.height().max(image.width()),
        });
    }
    let trainable: Vec<&LayerParams> = params.layers.iter().collect();
    let mut next_trainable = 0usize;
    let mut take_params = || -> Result<&LayerParams> {
        let p = trainable.get(next_trainable).ok_or(Error::ShapeMismatch {
            axis: "trainable layer count",
            expected: next_trainable + 1,
            actual: trainable.len(),
        })?;
        next_trainable += 1;
        Ok(p)
    };

    let mut stages = Vec::new();
    let mut current = FeatureStack::from_single(image.to_map2d());
    let mut flattened: Option<Vec<f64>> = None;
    let mut vector: Option<Vec<f64>> = None;
    let mut fully_connected = Vec::new();
    let mut output_input = Vec::new();
    let mut logits = Vec::new();

    for layer in &spec.layers {
        match *layer {
            LayerSpec::Convolution { .. } => {
                let LayerParams::Conv { filters, biases } = take_params()? else {
                    return Err(Error::ShapeMismatch {
                        axis: "trainable layer kind",
                        expected: 0,
                        actual: 1,
                    });
                };
                let pre = numerics::convolve_valid(&current, filters, biases)?;
                let activated = pre.map_values(activation);
                stages.push(StageTrace::Conv {
                    input: current,
                    pre_activation: pre,
                    activated: activated.clone(),
                });
                current = activated;
            }
            LayerSpec::MaxPool { region } => {
                let (out, trace) = numerics::maxpool(&current, region)?;
                stages.push(StageTrace::Pool {
                    trace,
                    output: out.clone(),
                });
                current = out;
            }
            LayerSpec::FullyConnected { .. } => {
                let x = match vector.take() {
                    Some(v) => v,
                    None => {
                        let flat = current.flatten();
                        flattened = Some(flat.clone());
                        flat
                    }
                };
                let LayerParams::Dense {
                    inputs,
                    outputs,
                    weights,
                    biases,
                } = take_params()?
                else {
                    return Err(Error::ShapeMismatch {
                        axis: "trainable layer kind",
                        expected: 1,
                        actual: 0,
                    });
                };
                if x.len() != *inputs {
                    return Err(Error::ShapeMismatch {
                        axis: "fully-connected input",
                        expected: *inputs,
                        actual: x.len(),
                    });
                }
                let pre = dense_forward(weights, biases, *inputs, *outputs, &x);
                let activated: Vec<f64> = pre.iter().map(|&z| activation(z)).collect();
                // Dropout on the first fully-connected layer only.
                let apply_dropout =
                    mode == Mode::Train && dropout.ratio > 0.0 && fully_connected.is_empty();
                let (dropout_trace, output) = if apply_dropout {
                    let keep_scale = 1.0 / (1.0 - dropout.ratio);
                    let kept: Vec<bool> =
                        (0..activated.len()).map(|_| !rng.random_bool(dropout.ratio)).collect();
                    let output: Vec<f64> = activated
                        .iter()
                        .zip(&kept)
                        .map(|(&a, &k)| if k { a * keep_scale } else { 0.0 })
                        .collect();
                    (Some(DropoutTrace { kept, keep_scale }), output)
                } else {
                    (None, activated.clone())
                };
                fully_connected.push(FcTrace {
                    input: x,
                    pre_activation: pre,
                    activated,
                    dropout: dropout_trace,
                    output: output.clone(),
                });
                vector = Some(output);
            }
            LayerSpec::SoftmaxOutput { classes } => {
                let x = match vector.take() {
                    Some(v) => v,
                    None => {
                        let flat = current.flatten();
                        flattened = Some(flat.clone());
                        flat
                    }
                };
                let LayerParams::Dense {
                    inputs,
                    outputs,
                    weights,
                    biases,
                } = take_params()?
                else {
                    return Err(Error::ShapeMismatch {
                        axis: "trainable layer kind",
                        expected: 1,
                        actual: 0,
                    });
                };
                if x.len() != *inputs || *outputs != classes {
                    return Err(Error::ShapeMismatch {
                        axis: "output layer input",
                        expected: *inputs,
                        actual: x.len(),
                    });
                }
                logits = dense_forward(weights, biases, *inputs, *outputs, &x);
                output_input = x;
            }
        }
    }
    if logits.is_empty() {
        return Err(Error::InvalidSpec {
            layer: spec.layers.len().saturating_sub(1),
            reason: "network must end with a softmax output layer".into(),
        });
    }
    let probabilities = softmax(&logits);
    Ok(ForwardTrace {
        stages,
        flattened: flattened.unwrap_or_default(),
        fully_connected,
        output_input,
        logits,
        probabilities,
        mode,
    })
}

/// Backward pass over a recorded trace. `label` is the target vector y (a
/// one-hot vector in training); the output-layer gradient uses the
/// softmax-plus-cross-entropy simplification `dE/dlogits = y_hat - y`.
/// Dropout masks recorded in the trace are replayed exactly.
pub fn backward(
    trace: &ForwardTrace,
    params: &NetworkParams,
    spec: &NetworkSpec,
    label: &[f64],
) -> Result<NetworkParams> {
    if label.len() != trace.probabilities.len() {
        return Err(Error::ShapeMismatch {
            axis: "label length",
            expected: trace.probabilities.len(),
            actual: label.len(),
        });
    }
    let classes = spec.class_count()?;
    if classes != trace.probabilities.len() {
        return Err(Error::ShapeMismatch {
            axis: "trace class count",
            expected: classes,
            actual: trace.probabilities.len(),
        });
    }
    let mut grads = params.zeros_like();

    // d E / d logits.
    let mut d_vec: Vec<f64> = trace
        .probabilities
        .iter()
        .zip(label)
        .map(|(&p, &y)| p - y)
        .collect();

    // Walk trainable layers backwards. The output layer comes last.
    let mut trainable_idx = params.layers.len();

    // Output layer.
    trainable_idx -= 1;
    let (LayerParams::Dense {
        inputs, outputs, weights, ..
    }, LayerParams::Dense {
        weights: g_weights,
        biases: g_biases,
        ..
    }) = (&params.layers[trainable_idx], &mut grads.layers[trainable_idx])
    else {
        return Err(Error::ShapeMismatch {
            axis: "trainable layer kind",
            expected: 1,
            actual: 0,
        });
    };
    let x = &trace.output_input;
    if x.len() != *inputs {
        return Err(Error::ShapeMismatch {
            axis: "output layer input",
            expected: *inputs,
            actual: x.len(),
        });
    }
    for o in 0..*outputs {
        g_biases[o] += d_vec[o];
        let row = &mut g_weights[o * inputs..(o + 1) * inputs];
        for (g, &v) in row.iter_mut().zip(x) {
            *g += d_vec[o] * v;
        }
    }
    d_vec = dense_backward_input(weights, *inputs, *outputs, &d_vec);

    // Hidden fully-connected layers, in reverse.
    for fc in trace.fully_connected.iter().rev() {
        trainable_idx -= 1;
        let (LayerParams::Dense {
            inputs, outputs, weights, ..
        }, LayerParams::Dense {
            weights: g_weights,
            biases: g_biases,
            ..
        }) = (&params.layers[trainable_idx], &mut grads.layers[trainable_idx])
        else {
            return Err(Error::ShapeMismatch {
                axis: "trainable layer kind",
                expected: 1,
                actual: 0,
            });
        };
        // Through dropout.
        if let Some(dropout) = &fc.dropout {
            for (d, &kept) in d_vec.iter_mut().zip(&dropout.kept) {
                *d = if kept { *d * dropout.keep_scale } else { 0.0 };
            }
        }
        // Through the activation.
        for (d, &z) in d_vec.iter_mut().zip(&fc.pre_activation) {
            *d *= activation_derivative(z);
        }
        if fc.input.len() != *inputs || d_vec.len() != *outputs {
            return Err(Error::ShapeMismatch {
                axis: "fully-connected input",
                expected: *inputs,
                actual: fc.input.len(),
            });
        }
        for o in 0..*outputs {
            g_biases[o] += d_vec[o];
            let row = &mut g_weights[o * inputs..(o + 1) * inputs];
            for (g, &v) in row.iter_mut().zip(&fc.input) {
                *g += d_vec[o] * v;
            }
        }
        d_vec = dense_backward_input(weights, *inputs, *outputs, &d_vec);
    }

    // Un-flatten into the last map-shaped stage.
    let Some(last_stage) = trace.stages.last() else {
        return Err(Error::InvalidSpec {
            layer: 0,
            reason: "network has no feature stages".into(),
        });
    };
    let (maps, h, w) = last_stage.output_shape();
    if d_vec.len() != maps * h * w {
        return Err(Error::ShapeMismatch {
            axis: "flattened feature vector",
            expected: maps * h * w,
            actual: d_vec.len(),
        });
    }
    let mut d_stack = FeatureStack::new(
        d_vec
            .chunks_exact(h * w)
            .map(|chunk| Map2D::from_values(h, w, chunk.to_vec()).expect("finite gradient"))
            .collect(),
    )?;

    // Feature stages in reverse.
    for stage in trace.stages.iter().rev() {
        match stage {
            StageTrace::Pool { trace: pool, .. } => {
                d_stack = numerics::backward_maxpool(pool, &d_stack)?;
            }
            StageTrace::Conv {
                input,
                pre_activation,
                ..
            } => {
                trainable_idx -= 1;
                let (LayerParams::Conv { filters, .. }, LayerParams::Conv {
                    filters: g_filters,
                    biases: g_biases,
                }) = (&params.layers[trainable_idx], &mut grads.layers[trainable_idx])
                else {
                    return Err(Error::ShapeMismatch {
                        axis: "trainable layer kind",
                        expected: 0,
                        actual: 1,
                    });
                };
                let d_pre = numerics::backward_activation(pre_activation, &d_stack)?;
                let conv_grads = numerics::backward_convolve(input, filters, &d_pre)?;
                for (g, src) in g_filters
                    .filters_mut()
                    .iter_mut()
                    .zip(conv_grads.filters.filters())
                {
                    g.values_mut().copy_from_slice(src.values());
                }
                g_biases.copy_from_slice(&conv_grads.biases);
                d_stack = conv_grads.input;
            }
        }
    }
    Ok(grads)
}

const MODEL_MAGIC: &[u8; 4] = b"CCNM";
const MODEL_VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a model to the versioned binary format: the magic tag `CCNM`,
/// a little-endian u32 format version, the spec, then every tensor as f32
/// little-endian in the fixed tensor order (per trainable layer: conv filters
/// input-map-major row-major then biases; dense weights row-major then
/// biases). Weights are stored in single precision.
pub fn serialize(params: &NetworkParams, spec: &NetworkSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut out, MODEL_VERSION);
    push_u32(&mut out, spec.input_size as u32);
    push_u32(&mut out, spec.layers.len() as u32);
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Convolution {
                filter_size,
                output_maps,
            } => {
                out.push(0);
                push_u32(&mut out, filter_size as u32);
                push_u32(&mut out, output_maps as u32);
            }
            LayerSpec::MaxPool { region } => {
                out.push(1);
                push_u32(&mut out, region as u32);
            }
            LayerSpec::FullyConnected { neurons } => {
                out.push(2);
                push_u32(&mut out, neurons as u32);
            }
            LayerSpec::SoftmaxOutput { classes } => {
                out.push(3);
                push_u32(&mut out, classes as u32);
            }
        }
    }
    let expected = param_count(spec)?;
    let actual = params.scalar_count();
    if expected != actual {
        return Err(Error::ShapeMismatch {
            axis: "parameter scalars",
            expected,
            actual,
        });
    }
    for (_, tensor) in params.tensors() {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::ModelFormat(format!(
                "truncated stream: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a model stream written by [`serialize`]. Rejects bad magic, an
/// unsupported version, truncation, and trailing bytes.
pub fn deserialize(data: &[u8]) -> Result<(NetworkParams, NetworkSpec)> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::ModelFormat(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MODEL_MAGIC
        )));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version}, expected {MODEL_VERSION}"
        )));
    }
    let input_size = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    if layer_count > 1024 {
        return Err(Error::ModelFormat(format!(
            "implausible layer count {layer_count}"
        )));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.u8()?;
        layers.push(match tag {
            0 => LayerSpec::Convolution {
                filter_size: r.u32()? as usize,
                output_maps: r.u32()? as usize,
            },
            1 => LayerSpec::MaxPool {
                region: r.u32()? as usize,
            },
            2 => LayerSpec::FullyConnected {
                neurons: r.u32()? as usize,
            },
            3 => LayerSpec::SoftmaxOutput {
                classes: r.u32()? as usize,
            },
            other => {
                return Err(Error::ModelFormat(format!("unknown layer tag {other}")));
            }
        });
    }
    let spec = NetworkSpec { input_size, layers };
    let dims = spec
        .trainable_dims()
        .map_err(|e| Error::ModelFormat(format!("embedded spec invalid: {e}")))?;
    let mut params = NetworkParams::zeros_for(&dims);
    for (_, tensor) in params.tensors_mut() {
        for v in tensor {
            *v = f64::from(r.f32()?);
        }
    }
    if r.pos != data.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes after weight data",
            data.len() - r.pos
        )));
    }
    Ok((params, spec))
}
