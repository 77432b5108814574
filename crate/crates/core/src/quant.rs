//! INT8 post-training quantization and an integer-only inference engine.
//!
//! Weights are symmetric per output channel (zero point 0, values in
//! `[-127, 127]`); activations are affine per tensor. Every conv/dense layer
//! accumulates `w * (q - zp_in)` in 32 bits, adds an int32 bias with scale
//! `s_in * s_w[c]`, and requantizes with a fixed-point multiplier. The two
//! head pre-activations are dequantized once and squashed in the real domain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::math;
use crate::model::{ControlCommand, FloatModel, LayerSpec, INPUT_LEN, INPUT_SIDE, MODEL_SPEC};
use crate::pipeline::FrameWindow;
use crate::tensor::{ConvSpec, Tape, Tensor};

/// Scale used for degenerate (constant) calibration ranges.
pub const MIN_SCALE: f32 = 1e-8;

/// Affine mapping `r = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

impl QuantParams {
    /// Model input: pixel `p` maps to `p - 128`.
    pub const INPUT: Self = Self { scale: 1.0 / 255.0, zero_point: -128 };

    /// Parameters covering `[min, max]` widened to contain 0, so that real
    /// zero lands exactly on the zero point.
    pub fn from_range(min: f64, max: f64) -> Self {
        let (min, max) = (min.min(0.0), max.max(0.0));
        if !(max > min) {
            return Self { scale: MIN_SCALE, zero_point: -128 };
        }
        let scale = ((max - min) / 255.0) as f32;
        if !(scale > 0.0) || !scale.is_finite() {
            return Self { scale: MIN_SCALE, zero_point: -128 };
        }
        let zp = math::round(-128.0 - min / scale as f64).clamp(-128.0, 127.0);
        Self { scale, zero_point: zp as i8 }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        let q = math::round(x / self.scale as f64) + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale as f64 * (q as i32 - self.zero_point as i32) as f64
    }
}

pub fn quantize_value(x: f64, p: &QuantParams) -> i8 {
    p.quantize(x)
}

pub fn dequantize_value(q: i8, p: &QuantParams) -> f64 {
    p.dequantize(q)
}

/// A real multiplier as `mantissa * 2^-31 * 2^-shift`, mantissa in
/// `[2^30, 2^31)`. Negative shifts (multipliers >= 1) are only produced for
/// calibrated layers with degenerate output ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedMultiplier {
    pub mantissa: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    /// Decomposes `m`, which must lie in `(0, 1)`.
    pub fn new(m: f64) -> Result<Self> {
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::InvalidMultiplier(m));
        }
        Ok(Self::decompose(m))
    }

    fn decompose(m: f64) -> Self {
        if !(m > 0.0) || !m.is_finite() {
            return Self { mantissa: 0, shift: 0 };
        }
        let (frac, exp) = math::frexp(m);
        let mut mantissa = math::round(frac * (1u64 << 31) as f64) as i64;
        let mut exp = exp;
        if mantissa == 1i64 << 31 {
            mantissa /= 2;
            exp += 1;
        }
        Self { mantissa: mantissa as i32, shift: -exp }
    }

    pub fn to_real(&self) -> f64 {
        self.mantissa as f64 / (1u64 << 31) as f64 * libm::exp2(-self.shift as f64)
    }

    /// `acc * M` rounded half away from zero, integer arithmetic only.
    pub fn apply(&self, acc: i32) -> i64 {
        if self.shift >= 0 {
            let high = saturating_rounding_doubling_high_mul(acc, self.mantissa) as i64;
            rounding_shift_right(high, self.shift as u32)
        } else {
            let left = (acc as i64) << (-self.shift).min(32);
            let left = left.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
            saturating_rounding_doubling_high_mul(left, self.mantissa) as i64
        }
    }
}

/// `round(a * b / 2^31)` with half away from zero, saturating the single
/// overflow case `i32::MIN * i32::MIN`.
pub fn saturating_rounding_doubling_high_mul(a: i32, b: i32) -> i32 {
    if a == i32::MIN && b == i32::MIN {
        return i32::MAX;
    }
    let ab = a as i64 * b as i64;
    let nudge = if ab >= 0 { 1i64 << 30 } else { -(1i64 << 30) };
    ((ab + nudge) / (1i64 << 31)) as i32
}

/// Division by `2^exponent` rounding half away from zero.
pub fn rounding_shift_right(x: i64, exponent: u32) -> i64 {
    if exponent == 0 {
        return x;
    }
    if exponent >= 63 {
        return 0;
    }
    let half = 1i64 << (exponent - 1);
    if x >= 0 {
        (x + half) >> exponent
    } else {
        -((-x + half) >> exponent)
    }
}

/// Requantizes a 32-bit accumulator to int8: `clamp(round(acc * M) + zp)`.
pub fn requantize(acc: i32, multiplier: &FixedMultiplier, out_zp: i8) -> i8 {
    (multiplier.apply(acc) + out_zp as i64).clamp(-128, 127) as i8
}

/// [`requantize`] for a real multiplier, validating `M` in `(0, 1)`.
pub fn requantize_real(acc: i32, multiplier: f64, out_zp: i8) -> Result<i8> {
    Ok(requantize(acc, &FixedMultiplier::new(multiplier)?, out_zp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    Conv(ConvSpec),
    Dense { inputs: usize, outputs: usize },
}

impl QuantKind {
    pub fn outputs(&self) -> usize {
        match self {
            QuantKind::Conv(c) => c.out_channels,
            QuantKind::Dense { outputs, .. } => *outputs,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            QuantKind::Conv(c) => c.kernel * c.kernel * c.in_channels,
            QuantKind::Dense { inputs, .. } => *inputs,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.fan_in() * self.outputs()
    }

    fn from_spec(spec: &LayerSpec) -> Self {
        match *spec {
            LayerSpec::Conv(c) => QuantKind::Conv(c),
            LayerSpec::Dense { inputs, outputs } => QuantKind::Dense { inputs, outputs },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub kind: QuantKind,
    /// Same layout as the float weights; output channel is the fastest axis.
    pub weights: Vec<i8>,
    pub weight_scales: Vec<f32>,
    pub bias: Vec<i32>,
    /// Output activation parameters. For the heads these describe the
    /// calibrated pre-activation range and are informational only.
    pub output: QuantParams,
}

/// The calibrated integer model: C1, C2, C3, D1, D2 (ReLU fused), then the
/// steering and throttle heads.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub layers: Vec<QuantLayer>,
    pub input: QuantParams,
    multipliers: Vec<Vec<FixedMultiplier>>,
}

const TRUNK_QLAYERS: usize = 5;

impl QuantModel {
    /// Assembles and validates a model from stored layers.
    pub fn from_parts(layers: Vec<QuantLayer>, input: QuantParams) -> Result<Self> {
        if layers.len() != MODEL_SPEC.len() {
            return Err(Error::Uncalibrated("quantized model needs 7 layers"));
        }
        for (layer, spec) in layers.iter().zip(&MODEL_SPEC) {
            if layer.kind != QuantKind::from_spec(spec) {
                return Err(Error::ShapeMismatch(format!("layer kind {:?} does not match {:?}", layer.kind, spec)));
            }
            let n = layer.kind.outputs();
            if layer.weights.len() != layer.kind.weight_len() || layer.weight_scales.len() != n || layer.bias.len() != n
            {
                return Err(Error::ShapeMismatch(format!("layer {:?} has inconsistent tensor sizes", layer.kind)));
            }
            if layer.weights.contains(&i8::MIN) {
                return Err(Error::ShapeMismatch("weights must lie in [-127, 127]".into()));
            }
            if layer.weight_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || !(layer.output.scale > 0.0) {
                return Err(Error::Uncalibrated("scales must be positive"));
            }
        }
        if !(input.scale > 0.0) {
            return Err(Error::Uncalibrated("input scale must be positive"));
        }
        let mut in_scale = input.scale as f64;
        let mut multipliers = Vec::with_capacity(TRUNK_QLAYERS);
        for layer in &layers[..TRUNK_QLAYERS] {
            let out_scale = layer.output.scale as f64;
            multipliers.push(
                layer
                    .weight_scales
                    .iter()
                    .map(|&sw| FixedMultiplier::decompose(in_scale * sw as f64 / out_scale))
                    .collect(),
            );
            in_scale = out_scale;
        }
        Ok(Self { layers, input, multipliers })
    }

    pub fn multipliers(&self) -> &[Vec<FixedMultiplier>] {
        &self.multipliers
    }

    /// Worst-case `|accumulator|` per layer for any int8 input.
    pub fn accumulator_bounds(&self) -> Vec<i64> {
        let mut in_zp = self.input.zero_point as i64;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let max_x = (127 - in_zp).max(in_zp + 128);
                let n = l.kind.outputs();
                let fan_in = l.kind.fan_in();
                let worst = (0..n)
                    .map(|c| {
                        let max_w: i64 = (0..fan_in).map(|k| (l.weights[k * n + c] as i64).abs()).sum();
                        max_w * max_x + (l.bias[c] as i64).abs()
                    })
                    .max()
                    .unwrap_or(0);
                if i < TRUNK_QLAYERS {
                    in_zp = l.output.zero_point as i64;
                }
                worst
            })
            .collect()
    }

    /// Integer trunk: returns the int8 D2 activations and their parameters.
    pub fn trunk(&self, pixels: &[u8]) -> Result<(Vec<i8>, QuantParams)> {
        if pixels.len() != INPUT_LEN {
            return Err(Error::ShapeMismatch(format!("window needs {INPUT_LEN} pixels, got {}", pixels.len())));
        }
        if self.multipliers.len() != TRUNK_QLAYERS {
            return Err(Error::Uncalibrated("missing requantization multipliers"));
        }
        let mut x: Vec<i8> = pixels.iter().map(|&p| self.input.quantize(p as f64 / 255.0)).collect();
        let mut zp = self.input.zero_point;
        let mut side = INPUT_SIDE;
        for (layer, mults) in self.layers[..TRUNK_QLAYERS].iter().zip(&self.multipliers) {
            x = match layer.kind {
                QuantKind::Conv(spec) => {
                    let y = conv_i8(&x, side, zp, layer, &spec, mults);
                    side = spec.out_size(side);
                    y
                }
                QuantKind::Dense { .. } => dense_i8(&x, zp, layer, mults),
            };
            zp = layer.output.zero_point;
        }
        Ok((x, self.layers[TRUNK_QLAYERS - 1].output))
    }

    /// Head pre-activations in the real domain.
    pub fn head_logits(&self, pixels: &[u8]) -> Result<(f64, f64)> {
        let (features, fp) = self.trunk(pixels)?;
        let logit = |layer: &QuantLayer| -> f64 {
            let acc = layer.bias[0] as i64
                + features
                    .iter()
                    .zip(&layer.weights)
                    .map(|(&q, &w)| w as i64 * (q as i64 - fp.zero_point as i64))
                    .sum::<i64>();
            acc as f64 * fp.scale as f64 * layer.weight_scales[0] as f64
        };
        Ok((logit(&self.layers[5]), logit(&self.layers[6])))
    }

    pub fn forward_pixels(&self, pixels: &[u8]) -> Result<ControlCommand> {
        let (s, t) = self.head_logits(pixels)?;
        Ok(ControlCommand { steering: math::tanh(s), throttle: math::sigmoid(t) })
    }
}

/// Integer forward pass over a raw pixel window (`24 x 24 x 20`).
pub fn int8_forward(qm: &QuantModel, pixels: &[u8]) -> Result<ControlCommand> {
    qm.forward_pixels(pixels)
}

fn conv_i8(
    x: &[i8],
    side: usize,
    zp_in: i8,
    layer: &QuantLayer,
    spec: &ConvSpec,
    mults: &[FixedMultiplier],
) -> Vec<i8> {
    let (k, cin, cout) = (spec.kernel, spec.in_channels, spec.out_channels);
    let out_side = spec.out_size(side);
    let (pad, _) = spec.padding(side);
    let xs: Vec<i16> = x.iter().map(|&q| q as i16 - zp_in as i16).collect();
    let zp_out = layer.output.zero_point;
    let mut acc = vec![0i32; cout];
    let mut out = Vec::with_capacity(out_side * out_side * cout);
    for oy in 0..out_side {
        for ox in 0..out_side {
            acc.copy_from_slice(&layer.bias);
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= side as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= side as isize {
                        continue;
                    }
                    let xin = &xs[(iy as usize * side + ix as usize) * cin..][..cin];
                    let wk = &layer.weights[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0 {
                            continue;
                        }
                        let xv = xv as i32;
                        for (a, &w) in acc.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *a += xv * w as i32;
                        }
                    }
                }
            }
            out.extend(acc.iter().zip(mults).map(|(&a, m)| requantize(a, m, zp_out).max(zp_out)));
        }
    }
    out
}

fn dense_i8(x: &[i8], zp_in: i8, layer: &QuantLayer, mults: &[FixedMultiplier]) -> Vec<i8> {
    let m = layer.kind.outputs();
    let mut acc = layer.bias.clone();
    for (i, &q) in x.iter().enumerate() {
        let xv = q as i32 - zp_in as i32;
        if xv == 0 {
            continue;
        }
        for (a, &w) in acc.iter_mut().zip(&layer.weights[i * m..(i + 1) * m]) {
            *a += xv * w as i32;
        }
    }
    let zp_out = layer.output.zero_point;
    acc.iter().zip(mults).map(|(&a, mm)| requantize(a, mm, zp_out).max(zp_out)).collect()
}

/// Per-tensor running min/max.
#[derive(Debug, Clone, Copy)]
struct Range {
    min: f64,
    max: f64,
}

impl Range {
    const EMPTY: Self = Self { min: f64::INFINITY, max: f64::NEG_INFINITY };

    fn observe(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }
}

/// Trunk tape indices of the post-ReLU outputs of C1, C2, C3, D1 and D2.
const TRUNK_OUTPUTS: [usize; TRUNK_QLAYERS] = [2, 4, 6, 9, 11];

fn quantize_weights(weights: &Tensor, outputs: usize) -> (Vec<i8>, Vec<f32>) {
    let w = weights.data();
    let mut max_abs = vec![0.0f64; outputs];
    for (i, v) in w.iter().enumerate() {
        let c = i % outputs;
        max_abs[c] = max_abs[c].max(v.abs());
    }
    let scales: Vec<f32> = max_abs
        .iter()
        .map(|&m| {
            let s = (m / 127.0) as f32;
            if s > 0.0 && s.is_finite() {
                s
            } else {
                MIN_SCALE
            }
        })
        .collect();
    let q = w
        .iter()
        .enumerate()
        .map(|(i, &v)| math::round(v / scales[i % outputs] as f64).clamp(-127.0, 127.0) as i8)
        .collect();
    (q, scales)
}

fn quantize_bias(bias: &Tensor, in_scale: f32, weight_scales: &[f32]) -> Vec<i32> {
    bias.data()
        .iter()
        .zip(weight_scales)
        .map(|(&b, &sw)| {
            let q = math::round(b / (in_scale as f64 * sw as f64));
            q.clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect()
}

/// Calibrates activation ranges by running the float model over every
/// representative window, then quantizes weights and biases.
pub fn calibrate(model: &FloatModel, representative: &[FrameWindow]) -> Result<QuantModel> {
    if representative.is_empty() {
        return Err(Error::EmptyInput("calibration needs representative windows"));
    }
    let mut ranges = [Range::EMPTY; 7];
    let mut tape = Tape::new();
    for w in representative {
        let features = model.trunk.forward_traced(&w.to_tensor(), &mut tape)?;
        for (range, &idx) in ranges.iter_mut().zip(&TRUNK_OUTPUTS) {
            range.observe(tape.values()[idx].data());
        }
        let s = model.steering.layers[0].forward(&features)?;
        let t = model.throttle.layers[0].forward(&features)?;
        ranges[5].observe(s.data());
        ranges[6].observe(t.data());
    }
    let input = QuantParams::INPUT;
    let mut in_scale = input.scale;
    let mut layers = Vec::with_capacity(7);
    let params = model.param_layers();
    let features_params = QuantParams::from_range(ranges[4].min, ranges[4].max);
    for (i, ((w, b), spec)) in params.iter().zip(&MODEL_SPEC).enumerate() {
        let kind = QuantKind::from_spec(spec);
        let (weights, weight_scales) = quantize_weights(w, kind.outputs());
        let layer_in_scale = if i >= TRUNK_QLAYERS { features_params.scale } else { in_scale };
        let bias = quantize_bias(b, layer_in_scale, &weight_scales);
        let output = QuantParams::from_range(ranges[i].min, ranges[i].max);
        if i < TRUNK_QLAYERS {
            in_scale = output.scale;
        }
        layers.push(QuantLayer { kind, weights, weight_scales, bias, output });
    }
    QuantModel::from_parts(layers, input)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FidelityReport {
    /// `None` when either output series is constant.
    pub steering_correlation: Option<f64>,
    pub throttle_correlation: Option<f64>,
    pub max_steering_deviation: f64,
    pub max_throttle_deviation: f64,
}

impl FidelityReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_steering_deviation.max(self.max_throttle_deviation)
    }
}

/// Float and int8 outputs over the same windows.
pub fn paired_outputs(
    fm: &FloatModel,
    qm: &QuantModel,
    windows: &[FrameWindow],
) -> Result<(Vec<ControlCommand>, Vec<ControlCommand>)> {
    let float = windows.iter().map(|w| fm.forward(&w.to_tensor())).collect::<Result<Vec<_>>>()?;
    let int8 = windows.iter().map(|w| qm.forward_pixels(&w.pixels)).collect::<Result<Vec<_>>>()?;
    Ok((float, int8))
}

/// Per-head Pearson correlation between float and int8 outputs.
pub fn fidelity_from_outputs(float: &[ControlCommand], int8: &[ControlCommand]) -> Result<FidelityReport> {
    if float.len() != int8.len() {
        return Err(Error::LengthMismatch { left: float.len(), right: int8.len() });
    }
    let fs: Vec<f64> = float.iter().map(|c| c.steering).collect();
    let qs: Vec<f64> = int8.iter().map(|c| c.steering).collect();
    let ft: Vec<f64> = float.iter().map(|c| c.throttle).collect();
    let qt: Vec<f64> = int8.iter().map(|c| c.throttle).collect();
    let dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(FidelityReport {
        steering_correlation: crate::eval::defined(pearson(&fs, &qs))?,
        throttle_correlation: crate::eval::defined(pearson(&ft, &qt))?,
        max_steering_deviation: dev(&fs, &qs),
        max_throttle_deviation: dev(&ft, &qt),
    })
}

pub fn fidelity_report(fm: &FloatModel, qm: &QuantModel, windows: &[FrameWindow]) -> Result<FidelityReport> {
    if windows.len() < 2 {
        return Err(Error::EmptyInput("fidelity needs at least two windows"));
    }
    let (float, int8) = paired_outputs(fm, qm, windows)?;
    fidelity_from_outputs(&float, &int8)
}

/// Float model rebuilt from the quantized weights (dequantized), useful for
/// isolating weight error from activation error.
pub fn dequantized_float_model(qm: &QuantModel) -> Result<FloatModel> {
    let mut params = Vec::with_capacity(qm.layers.len());
    let mut in_scale = qm.input.scale as f64;
    for (i, layer) in qm.layers.iter().enumerate() {
        let n = layer.kind.outputs();
        let dims: Vec<usize> = match layer.kind {
            QuantKind::Conv(c) => c.weight_dims().to_vec(),
            QuantKind::Dense { inputs, outputs } => vec![inputs, outputs],
        };
        let w: Vec<f64> =
            layer.weights.iter().enumerate().map(|(k, &q)| q as f64 * layer.weight_scales[k % n] as f64).collect();
        let s_in = if i >= TRUNK_QLAYERS { qm.layers[TRUNK_QLAYERS - 1].output.scale as f64 } else { in_scale };
        let b: Vec<f64> =
            layer.bias.iter().zip(&layer.weight_scales).map(|(&q, &sw)| q as f64 * s_in * sw as f64).collect();
        params.push((Tensor::new(&dims, w)?, Tensor::new(&[n], b)?));
        if i < TRUNK_QLAYERS {
            in_scale = layer.output.scale as f64;
        }
    }
    FloatModel::from_layers(params, Default::default())
}
