//! The reference navigation network.
//!
//! ```text
//! 24x24x20 -> C1 conv3x3/2 16 relu -> C2 conv3x3/2 24 relu -> C3 conv3x3/2 32 relu
//!          -> flatten 288 -> D1 32 relu -> D2 16 relu -+-> steering 1 tanh
//!                                                      +-> throttle 1 sigmoid
//! ```
//!
//! 23,130 parameters in total. Inputs are pixels scaled by 1/255.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Activation, Conv2d, ConvSpec, Dense, Gradients, Layer, Sequential, Tape, Tensor};

pub const INPUT_SIDE: usize = 24;
pub const WINDOW_LEN: usize = 20;
pub const INPUT_LEN: usize = INPUT_SIDE * INPUT_SIDE * WINDOW_LEN;
pub const PARAM_COUNT: usize = 23_130;
/// Layer index of C3's convolution inside the trunk.
pub const LAST_CONV: usize = 4;
/// Trunk layer index of D2's post-ReLU output (the shared features).
pub const TRUNK_LEN: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlCommand {
    /// -1 (full left) to 1 (full right).
    pub steering: f64,
    /// 0 (stop) to 1 (full speed).
    pub throttle: f64,
}

impl ControlCommand {
    pub const STOP: Self = Self { steering: 0.0, throttle: 0.0 };

    pub fn new(steering: f64, throttle: f64) -> Self {
        Self { steering, throttle }
    }

    pub fn clamped(self) -> Self {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(lo, hi) };
        Self { steering: fix(self.steering, -1.0, 1.0), throttle: fix(self.throttle, 0.0, 1.0) }
    }

    pub fn in_range(&self) -> bool {
        (-1.0..=1.0).contains(&self.steering) && (0.0..=1.0).contains(&self.throttle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Head {
    Steering,
    Throttle,
}

/// Layer descriptions of the reference network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    Dense { inputs: usize, outputs: usize },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.param_count(),
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
        }
    }
}

/// Parametric layers in storage order: C1, C2, C3, D1, D2, steering, throttle.
pub const MODEL_SPEC: [LayerSpec; 7] = [
    LayerSpec::Conv(ConvSpec { kernel: 3, stride: 2, in_channels: 20, out_channels: 16 }),
    LayerSpec::Conv(ConvSpec { kernel: 3, stride: 2, in_channels: 16, out_channels: 24 }),
    LayerSpec::Conv(ConvSpec { kernel: 3, stride: 2, in_channels: 24, out_channels: 32 }),
    LayerSpec::Dense { inputs: 288, outputs: 32 },
    LayerSpec::Dense { inputs: 32, outputs: 16 },
    LayerSpec::Dense { inputs: 16, outputs: 1 },
    LayerSpec::Dense { inputs: 16, outputs: 1 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelMeta {
    pub seed: u64,
    /// Digest of the training configuration that produced the weights; 0 if untrained.
    pub train_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub trunk: Sequential,
    pub steering: Sequential,
    pub throttle: Sequential,
    pub meta: ModelMeta,
}

/// Pre-activation head outputs plus the trunk trace, kept for backprop.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub trunk: Tape,
    pub steering: Tape,
    pub throttle: Tape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub trunk: Gradients,
    pub steering: Gradients,
    pub throttle: Gradients,
}

impl ModelGradients {
    pub fn zeros_like(model: &FloatModel) -> Self {
        Self {
            trunk: Gradients::zeros_like(&model.trunk),
            steering: Gradients::zeros_like(&model.steering),
            throttle: Gradients::zeros_like(&model.throttle),
        }
    }

    pub fn fill_zero(&mut self) {
        self.trunk.fill_zero();
        self.steering.fill_zero();
        self.throttle.fill_zero();
    }

    pub fn scale(&mut self, f: f64) {
        self.trunk.scale(f);
        self.steering.scale(f);
        self.throttle.scale(f);
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn conv_layer(rng: &mut ChaCha8Rng, spec: ConvSpec) -> Layer {
    let fan_in = spec.kernel * spec.kernel * spec.in_channels;
    let limit = math::sqrt(6.0 / fan_in as f64);
    let w = uniform(rng, spec.weight_dims().iter().product(), limit);
    Layer::Conv(Conv2d {
        spec,
        weights: Tensor::new(&spec.weight_dims(), w).expect("shape from spec"),
        bias: Tensor::zeros(&[spec.out_channels]),
    })
}

fn dense_layer(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, xavier: bool) -> Layer {
    let limit = if xavier { math::sqrt(6.0 / (inputs + outputs) as f64) } else { math::sqrt(6.0 / inputs as f64) };
    Layer::Dense(Dense {
        weights: Tensor::new(&[inputs, outputs], uniform(rng, inputs * outputs, limit)).expect("shape from spec"),
        bias: Tensor::zeros(&[outputs]),
    })
}

impl FloatModel {
    /// He-uniform for the ReLU layers, Xavier-uniform for the heads, zero
    /// biases. Deterministic in `seed`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relu = || Layer::Act(Activation::Relu);
        let mut trunk = Vec::with_capacity(TRUNK_LEN);
        for spec in &MODEL_SPEC[..3] {
            let LayerSpec::Conv(c) = spec else { unreachable!() };
            trunk.push(conv_layer(&mut rng, *c));
            trunk.push(relu());
        }
        trunk.push(Layer::Flatten);
        trunk.push(dense_layer(&mut rng, 288, 32, false));
        trunk.push(relu());
        trunk.push(dense_layer(&mut rng, 32, 16, false));
        trunk.push(relu());
        let steering = Sequential::new(vec![dense_layer(&mut rng, 16, 1, true), Layer::Act(Activation::Tanh)]);
        let throttle = Sequential::new(vec![dense_layer(&mut rng, 16, 1, true), Layer::Act(Activation::Sigmoid)]);
        Self { trunk: Sequential::new(trunk), steering, throttle, meta: ModelMeta { seed, train_digest: 0 } }
    }

    /// Builds a model from parametric layers given in [`MODEL_SPEC`] order.
    pub fn from_layers(params: Vec<(Tensor, Tensor)>, meta: ModelMeta) -> Result<Self> {
        if params.len() != MODEL_SPEC.len() {
            return Err(Error::ShapeMismatch(format!("expected {} layers, got {}", MODEL_SPEC.len(), params.len())));
        }
        let mut model = Self::init(0);
        model.meta = meta;
        for (slot, (w, b)) in model.param_layers_mut().into_iter().zip(params) {
            if slot.0.dims() != w.dims() || slot.1.dims() != b.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "layer shape {:?}/{:?} does not match {:?}/{:?}",
                    w.dims(),
                    b.dims(),
                    slot.0.dims(),
                    slot.1.dims()
                )));
            }
            *slot.0 = w;
            *slot.1 = b;
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.steering.param_count() + self.throttle.param_count()
    }

    /// Parametric layers in [`MODEL_SPEC`] order.
    pub fn param_layers(&self) -> Vec<(&Tensor, &Tensor)> {
        self.trunk
            .layers
            .iter()
            .chain(&self.steering.layers)
            .chain(&self.throttle.layers)
            .filter_map(Layer::params)
            .collect()
    }

    pub fn param_layers_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        self.trunk
            .layers
            .iter_mut()
            .chain(self.steering.layers.iter_mut())
            .chain(self.throttle.layers.iter_mut())
            .filter_map(Layer::params_mut)
            .collect()
    }

    fn check_input(window: &Tensor) -> Result<()> {
        if window.dims() != [INPUT_SIDE, INPUT_SIDE, WINDOW_LEN] {
            return Err(Error::ShapeMismatch(format!("model input must be 24x24x20, found {:?}", window.dims())));
        }
        Ok(())
    }

    /// Steering and throttle pre-activations.
    pub fn forward_logits(&self, window: &Tensor) -> Result<(f64, f64)> {
        Self::check_input(window)?;
        let features = self.trunk.forward(window)?;
        let s = self.steering.layers[0].forward(&features)?;
        let t = self.throttle.layers[0].forward(&features)?;
        Ok((s.data()[0], t.data()[0]))
    }

    pub fn forward(&self, window: &Tensor) -> Result<ControlCommand> {
        let (s, t) = self.forward_logits(window)?;
        Ok(ControlCommand { steering: math::tanh(s), throttle: math::sigmoid(t) })
    }

    /// Forward pass from raw 8-bit pixels (channel-last 24x24x20).
    pub fn forward_pixels(&self, pixels: &[u8]) -> Result<ControlCommand> {
        self.forward(&normalize_pixels(pixels)?)
    }

    pub fn forward_traced(&self, window: &Tensor, trace: &mut ForwardTrace) -> Result<ControlCommand> {
        Self::check_input(window)?;
        let features = self.trunk.forward_traced(window, &mut trace.trunk)?;
        let s = self.steering.forward_traced(&features, &mut trace.steering)?;
        let t = self.throttle.forward_traced(&features, &mut trace.throttle)?;
        Ok(ControlCommand { steering: s.data()[0], throttle: t.data()[0] })
    }

    /// Backpropagates loss gradients with respect to the two head outputs
    /// (post-activation) and adds parameter gradients into `grads`. Returns
    /// the gradients of every trunk value.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_steering: f64,
        d_throttle: f64,
        grads: &mut ModelGradients,
        want_input_grad: bool,
    ) -> Result<Vec<Option<Tensor>>> {
        let one = |v: f64| Tensor::new(&[1], vec![v]);
        let gs = self.steering.backward(&trace.steering, &one(d_steering)?, &mut grads.steering, true)?;
        let gt = self.throttle.backward(&trace.throttle, &one(d_throttle)?, &mut grads.throttle, true)?;
        let (gs, gt) = match (&gs[0], &gt[0]) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::NoTrace),
        };
        let data = gs.data().iter().zip(gt.data()).map(|(a, b)| a + b).collect();
        let g = Tensor::new(gs.dims(), data)?;
        self.trunk.backward(&trace.trunk, &g, &mut grads.trunk, want_input_grad)
    }

    /// Backpropagates from one head's pre-activation output. Returns trunk
    /// value gradients and the head parameter gradients are discarded.
    pub fn head_logit_backward(&self, trace: &ForwardTrace, head: Head) -> Result<Vec<Option<Tensor>>> {
        let (net, tape) = match head {
            Head::Steering => (&self.steering, &trace.steering),
            Head::Throttle => (&self.throttle, &trace.throttle),
        };
        if tape.values().len() != 3 || trace.trunk.is_empty() {
            return Err(Error::NoTrace);
        }
        // Skip the output activation: seed the dense layer's output with 1.
        let dense = Sequential::new(vec![net.layers[0].clone()]);
        let mut sub = Tape::new();
        dense.forward_traced(&tape.values()[0], &mut sub)?;
        let mut head_grads = Gradients::zeros_like(&dense);
        let g = dense.backward(&sub, &Tensor::new(&[1], vec![1.0])?, &mut head_grads, true)?;
        let g0 = g[0].clone().ok_or(Error::NoTrace)?;
        let mut trunk_grads = Gradients::zeros_like(&self.trunk);
        self.trunk.backward(&trace.trunk, &g0, &mut trunk_grads, false)
    }
}

/// Scales channel-last pixels into a `[0, 1]` model input tensor.
pub fn normalize_pixels(pixels: &[u8]) -> Result<Tensor> {
    if pixels.len() != INPUT_LEN {
        return Err(Error::ShapeMismatch(format!("window needs {INPUT_LEN} pixels, got {}", pixels.len())));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(&[INPUT_SIDE, INPUT_SIDE, WINDOW_LEN], data)
}
