//! Dense f64 tensors and the handful of layers the navigation network uses,
//! with analytic backward passes.
//!
//! Images are channel-last (`height x width x channels`); conv kernels are
//! `k x k x in x out`; dense weights are `in x out`. All loops run in a fixed
//! order so identical inputs give bit-identical outputs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn dims_str(dims: &[usize]) -> String {
    let parts: Vec<String> = dims.iter().map(|d| format!("{d}")).collect();
    parts.join("x")
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 || dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid dims {}", dims_str(dims))));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("dims {} need {n} values, got {}", dims_str(dims), data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("tensor values must be finite".into()));
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {}",
                dims_str(&self.dims),
                dims_str(dims)
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    fn expect_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {}, found {}",
                dims_str(dims),
                dims_str(&self.dims)
            )));
        }
        Ok(())
    }
}

/// Strided square convolution with TensorFlow-style "same" padding: the output
/// side is `ceil(in / stride)` and any odd padding goes at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { kernel, stride, in_channels, out_channels }
    }

    pub fn out_size(&self, input: usize) -> usize {
        input.div_ceil(self.stride)
    }

    /// `(pad_begin, pad_end)` for one spatial axis.
    pub fn padding(&self, input: usize) -> (usize, usize) {
        let out = self.out_size(input);
        let total = ((out - 1) * self.stride + self.kernel).saturating_sub(input);
        let begin = total / 2;
        (begin, total - begin)
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_channels, self.out_channels]
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels
    }

    fn check(&self, input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::ShapeMismatch("kernel and stride must be positive".into()));
        }
        let d = input.dims();
        if d.len() != 3 || d[2] != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv input: expected HxWx{}, found {}",
                self.in_channels,
                dims_str(d)
            )));
        }
        weights.expect_dims(&self.weight_dims(), "conv weights")?;
        bias.expect_dims(&[self.out_channels], "conv bias")?;
        Ok((d[0], d[1]))
    }
}

pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, w) = spec.check(input, weights, bias)?;
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let (pt, _) = spec.padding(h);
    let (pl, _) = spec.padding(w);
    let (k, cin, cout) = (spec.kernel, spec.in_channels, spec.out_channels);
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(bias.data());
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wk = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (ov, &wv) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor { dims: vec![oh, ow, cout], data: out })
}

/// Returns `(grad_input, grad_weights, grad_bias)`; the input gradient is
/// only computed when asked for.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let mut gw = Tensor::zeros(&spec.weight_dims());
    let mut gb = Tensor::zeros(&[spec.out_channels]);
    let gi = conv2d_backward_acc(input, weights, spec, grad_out, want_input_grad, gw.data_mut(), gb.data_mut())?;
    Ok((gi, gw, gb))
}

/// Same as [`conv2d_backward`] but adds the parameter gradients into the
/// given buffers.
pub fn conv2d_backward_acc(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    want_input_grad: bool,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Result<Option<Tensor>> {
    let bias_probe = Tensor::zeros(&[spec.out_channels]);
    let (h, w) = spec.check(input, weights, &bias_probe)?;
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    grad_out.expect_dims(&[oh, ow, spec.out_channels], "conv grad_out")?;
    let (pt, _) = spec.padding(h);
    let (pl, _) = spec.padding(w);
    let (k, cin, cout) = (spec.kernel, spec.in_channels, spec.out_channels);
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gi = if want_input_grad { vec![0.0; h * w * cin] } else { Vec::new() };
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * cout..][..cout];
            for (b, &gv) in gb.iter_mut().zip(go) {
                *b += gv;
            }
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base_in = (iy as usize * w + ix as usize) * cin;
                    let base_w = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[base_in + ci];
                        let wrow = base_w + ci * cout;
                        if xv != 0.0 {
                            for (gwv, &gv) in gw[wrow..wrow + cout].iter_mut().zip(go) {
                                *gwv += xv * gv;
                            }
                        }
                        if want_input_grad {
                            let mut acc = 0.0;
                            for (&wv, &gv) in wt[wrow..wrow + cout].iter().zip(go) {
                                acc += wv * gv;
                            }
                            gi[base_in + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(want_input_grad.then(|| Tensor { dims: vec![h, w, cin], data: gi }))
}

pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, m) = dense_dims(input, weights, bias)?;
    let mut out = bias.data().to_vec();
    let wt = weights.data();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (ov, &wv) in out.iter_mut().zip(&wt[i * m..(i + 1) * m]) {
            *ov += xv * wv;
        }
    }
    debug_assert_eq!(input.len(), n);
    Ok(Tensor { dims: vec![m], data: out })
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let wd = weights.dims();
    if wd.len() != 2 || wd[0] != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "dense: input of {} values against weights {}",
            input.len(),
            dims_str(wd)
        )));
    }
    bias.expect_dims(&[wd[1]], "dense bias")?;
    Ok((wd[0], wd[1]))
}

pub fn dense_backward_acc(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input_grad: bool,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Result<Option<Tensor>> {
    let wd = weights.dims();
    if wd.len() != 2 || wd[0] != input.len() || grad_out.len() != wd[1] {
        return Err(Error::ShapeMismatch("dense backward shapes".into()));
    }
    let m = wd[1];
    let g = grad_out.data();
    for (b, &gv) in gb.iter_mut().zip(g) {
        *b += gv;
    }
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (gwv, &gv) in gw[i * m..(i + 1) * m].iter_mut().zip(g) {
            *gwv += xv * gv;
        }
    }
    if !want_input_grad {
        return Ok(None);
    }
    let wt = weights.data();
    let gi = (0..wd[0]).map(|i| wt[i * m..(i + 1) * m].iter().zip(g).map(|(&wv, &gv)| wv * gv).sum()).collect();
    Ok(Some(Tensor { dims: input.dims.clone(), data: gi }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => math::tanh(x),
            Activation::Sigmoid => math::sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`. ReLU uses a
    /// zero subgradient at 0.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    Tensor { dims: x.dims.clone(), data: x.data.iter().map(|&v| kind.apply(v)).collect() }
}

pub fn activation_backward(output: &Tensor, grad_out: &Tensor, kind: Activation) -> Result<Tensor> {
    if output.dims != grad_out.dims {
        return Err(Error::ShapeMismatch("activation backward shapes".into()));
    }
    let data = output.data.iter().zip(&grad_out.data).map(|(&y, &g)| g * kind.derivative_from_output(y)).collect();
    Ok(Tensor { dims: output.dims.clone(), data })
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: target.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("mse"));
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

/// `d mse / d pred = 2 (pred - target) / n`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: target.len() });
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Dense(Dense),
    Act(Activation),
    Flatten,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.len() + c.bias.len(),
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            _ => 0,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => conv2d_forward(x, &c.weights, &c.bias, &c.spec),
            Layer::Dense(d) => dense_forward(x, &d.weights, &d.bias),
            Layer::Act(a) => Ok(activate(x, *a)),
            Layer::Flatten => x.clone().reshape(&[x.len()]),
        }
    }

    /// `(weights, bias)` of a parametric layer.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv(c) => Some((&c.weights, &c.bias)),
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weights, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            _ => None,
        }
    }
}

/// Values recorded by a traced forward pass: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.values.last()
    }
}

/// Parameter gradients aligned with a [`Sequential`]'s layers; non-parametric
/// layers hold empty buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Sequential) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l.params() {
                Some((w, b)) => (vec![0.0; w.len()], vec![0.0; b.len()]),
                None => (Vec::new(), Vec::new()),
            })
            .collect();
        Self { layers }
    }

    pub fn fill_zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Forward pass that records every intermediate value into `tape`.
    pub fn forward_traced(&self, input: &Tensor, tape: &mut Tape) -> Result<Tensor> {
        tape.values.clear();
        tape.values.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(tape.values.last().expect("tape holds the input"))?;
            tape.values.push(next);
        }
        Ok(tape.values.last().cloned().expect("tape holds the output"))
    }

    /// Backpropagates `grad_out` through the recorded trace, adding parameter
    /// gradients into `grads`. Returns the gradient with respect to every
    /// recorded value (`None` for the input unless `want_input_grad`).
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: &Tensor,
        grads: &mut Gradients,
        want_input_grad: bool,
    ) -> Result<Vec<Option<Tensor>>> {
        if tape.values.len() != self.layers.len() + 1 {
            return Err(Error::NoTrace);
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("gradient buffer does not match network".into()));
        }
        let out = tape.values.last().expect("non-empty tape");
        if out.dims() != grad_out.dims() {
            return Err(Error::ShapeMismatch(format!(
                "grad_out: expected {}, found {}",
                dims_str(out.dims()),
                dims_str(grad_out.dims())
            )));
        }
        let mut value_grads: Vec<Option<Tensor>> = vec![None; tape.values.len()];
        let mut g = grad_out.clone();
        value_grads[self.layers.len()] = Some(g.clone());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.values[i];
            let need = i > 0 || want_input_grad;
            let (gw, gb) = &mut grads.layers[i];
            let next = match layer {
                Layer::Conv(c) => conv2d_backward_acc(input, &c.weights, &c.spec, &g, need, gw, gb)?,
                Layer::Dense(d) => dense_backward_acc(input, &d.weights, &g, need, gw, gb)?,
                Layer::Act(a) => Some(activation_backward(&tape.values[i + 1], &g, *a)?),
                Layer::Flatten => Some(g.clone().reshape(input.dims())?),
            };
            match next {
                Some(t) => {
                    value_grads[i] = Some(t.clone());
                    g = t;
                }
                None => break,
            }
        }
        if !want_input_grad {
            value_grads[0] = None;
        }
        Ok(value_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition of the padded cross-correlation, written without the
    /// channel-last inner loop of the kernel.
    fn conv_oracle(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Tensor {
        let (h, w, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
        let (oh, ow) = (h.div_ceil(spec.stride), w.div_ceil(spec.stride));
        let pad_h = ((oh - 1) * spec.stride + spec.kernel).saturating_sub(h) / 2;
        let pad_w = ((ow - 1) * spec.stride + spec.kernel).saturating_sub(w) / 2;
        let k = spec.kernel;
        let cout = spec.out_channels;
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            for ci in 0..cin {
                                let iy = (oy * spec.stride + ky) as i64 - pad_h as i64;
                                let ix = (ox * spec.stride + kx) as i64 - pad_w as i64;
                                let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    input.data()[(iy as usize * w + ix as usize) * cin + ci]
                                } else {
                                    0.0
                                };
                                acc += v * weights.data()[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_shape_for_first_layer() {
        let spec = ConvSpec::new(3, 2, 20, 16);
        let x = Tensor::zeros(&[24, 24, 20]);
        let y = conv2d_forward(&x, &Tensor::zeros(&spec.weight_dims()), &Tensor::zeros(&[16]), &spec).unwrap();
        assert_eq!(y.dims(), &[12, 12, 16]);
        assert_eq!(spec.padding(24), (0, 1));
        assert_eq!(spec.padding(12), (0, 1));
        assert_eq!(spec.padding(6), (0, 1));
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[5, 7, 1]);
        let spec = ConvSpec::new(1, 1, 1, 1);
        let y =
            conv2d_forward(&x, &Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap(), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_computed_padded_convolutions() {
        let spec = ConvSpec::new(3, 2, 1, 1);
        let ones_w = Tensor::new(&[3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]);
        // 3x3 input: out 2, pad_total 2 -> one row/column of padding each side.
        let x3 = Tensor::new(&[3, 3, 1], vec![1.0; 9]).unwrap();
        assert_eq!(spec.padding(3), (1, 1));
        let y = conv2d_forward(&x3, &ones_w, &b, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
        assert_eq!(y, conv_oracle(&x3, &ones_w, &b, &spec));
        // 4x4 input: pad_total 1, all of it at the end.
        let x4 = Tensor::new(&[4, 4, 1], vec![1.0; 16]).unwrap();
        assert_eq!(spec.padding(4), (0, 1));
        let y = conv2d_forward(&x4, &ones_w, &b, &spec).unwrap();
        assert_eq!(y.data(), &[9.0, 6.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, s, k) in &[(7, 5, 2, 3), (8, 8, 1, 3), (6, 9, 3, 2), (24, 24, 2, 3)] {
            let spec = ConvSpec::new(k, s, 3, 4);
            let x = rand_tensor(&mut rng, &[h, w, 3]);
            let wt = rand_tensor(&mut rng, &spec.weight_dims());
            let b = rand_tensor(&mut rng, &[4]);
            let got = conv2d_forward(&x, &wt, &b, &spec).unwrap();
            let want = conv_oracle(&x, &wt, &b, &spec);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let spec = ConvSpec::new(3, 2, 4, 2);
        let err = conv2d_forward(
            &Tensor::zeros(&[6, 6, 3]),
            &Tensor::zeros(&spec.weight_dims()),
            &Tensor::zeros(&[2]),
            &spec,
        );
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
        let err =
            conv2d_forward(&Tensor::zeros(&[6, 6, 4]), &Tensor::zeros(&[3, 3, 4, 3]), &Tensor::zeros(&[2]), &spec);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = dense_forward(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = dense_forward(&x, &w, &Tensor::new(&[2], vec![10.0, 10.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[16]);
        let w = rand_tensor(&mut rng, &[16, 1]);
        let b = rand_tensor(&mut rng, &[1]);
        let y = dense_forward(&x, &w, &b).unwrap();
        let mut dot = b.data()[0];
        for i in 0..16 {
            dot += x.data()[i] * w.data()[i];
        }
        assert!((y.data()[0] - dot).abs() < 1e-12);
        assert!(dense_forward(&x, &Tensor::zeros(&[15, 1]), &b).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert!((Activation::Tanh.apply(2.0) - 0.964_027_580_075_816_9).abs() < 1e-12);
        assert_eq!(Activation::Tanh.derivative_from_output(Activation::Tanh.apply(0.0)), 1.0);
        assert_eq!(Activation::Relu.derivative_from_output(0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-20.0..20.0);
            let s = Activation::Sigmoid.apply(x) + Activation::Sigmoid.apply(-x);
            assert!((s - 1.0).abs() < 1e-12);
            let t = Activation::Tanh.apply(x);
            assert!((-1.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn mse_gradient_definition() {
        let p = [0.5, -1.0, 2.0];
        let t = [0.0, 0.0, 2.0];
        assert!((mse(&p, &t).unwrap() - 1.25 / 3.0).abs() < 1e-15);
        assert_eq!(mse_grad(&p, &t).unwrap(), vec![1.0 / 3.0, -2.0 / 3.0, 0.0]);
        assert_eq!(mse(&p, &t[..2]), Err(Error::LengthMismatch { left: 3, right: 2 }));
    }

    #[test]
    fn backward_needs_a_trace() {
        let net = Sequential::new(vec![Layer::Act(Activation::Relu)]);
        let mut grads = Gradients::zeros_like(&net);
        let err = net.backward(&Tape::new(), &Tensor::zeros(&[1]), &mut grads, true);
        assert_eq!(err, Err(Error::NoTrace));
    }

    #[test]
    fn linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ConvSpec::new(3, 2, 2, 3);
        let x = rand_tensor(&mut rng, &[6, 5, 2]);
        let w1 = rand_tensor(&mut rng, &spec.weight_dims());
        let w2 = rand_tensor(&mut rng, &spec.weight_dims());
        let b = rand_tensor(&mut rng, &[3]);
        let sum =
            Tensor::new(&spec.weight_dims(), w1.data().iter().zip(w2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let f = |w: &Tensor| conv2d_forward(&x, w, &b, &spec).unwrap();
        let zero = f(&Tensor::zeros(&spec.weight_dims()));
        let (a, b1, b2) = (f(&sum), f(&w1), f(&w2));
        for i in 0..a.len() {
            assert!((a.data()[i] - (b1.data()[i] + b2.data()[i] - zero.data()[i])).abs() < 1e-12);
        }
    }
}
