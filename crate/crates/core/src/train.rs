//! Behavioral-cloning trainer: weighted dual-head MSE, Adam, seeded
//! mini-batches. Everything runs in f64 with a fixed reduction order, so a
//! given `(seed, data, config)` always produces the same weights.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{ControlCommand, FloatModel, ForwardTrace, ModelGradients};
use crate::pipeline::{FrameWindow, SplitDataset};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub steering: f64,
    pub throttle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { steering: 1.0, throttle: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("adam betas must be in [0, 1) and epsilon positive"));
        }
        Ok(())
    }

    /// FNV-1a over the configuration fields, stored in trained model metadata.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for f in [
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.loss_weights.steering,
            self.loss_weights.throttle,
        ] {
            eat(&f.to_bits().to_le_bytes());
        }
        eat(&(self.batch_size as u64).to_le_bytes());
        eat(&(self.epochs as u64).to_le_bytes());
        eat(&self.seed.to_le_bytes());
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub loss: f64,
    pub steering_mse: f64,
    pub throttle_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    /// Mean mini-batch loss seen during each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_steering_mse: Vec<f64>,
    pub val_throttle_mse: Vec<f64>,
    /// Train-set metrics of the returned model.
    pub final_train: Metrics,
    /// Filled by callers that can read a clock.
    pub wall_time_s: f64,
}

/// `w_s * MSE(steering) + w_t * MSE(throttle)`.
pub fn loss(pred: &[ControlCommand], target: &[ControlCommand], weights: LossWeights) -> Result<f64> {
    let m = mse_pair(pred, target)?;
    Ok(weights.steering * m.0 + weights.throttle * m.1)
}

fn mse_pair(pred: &[ControlCommand], target: &[ControlCommand]) -> Result<(f64, f64)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: target.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("loss over an empty batch"));
    }
    let (mut s, mut t) = (0.0, 0.0);
    for (p, y) in pred.iter().zip(target) {
        s += (p.steering - y.steering) * (p.steering - y.steering);
        t += (p.throttle - y.throttle) * (p.throttle - y.throttle);
    }
    let n = pred.len() as f64;
    Ok((s / n, t / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub steering_mse: f64,
    pub throttle_mse: f64,
    pub predictions: Vec<ControlCommand>,
}

impl Evaluation {
    pub fn metrics(&self, weights: LossWeights) -> Metrics {
        Metrics {
            loss: weights.steering * self.steering_mse + weights.throttle * self.throttle_mse,
            steering_mse: self.steering_mse,
            throttle_mse: self.throttle_mse,
        }
    }
}

/// Pure inference over `windows`.
pub fn evaluate(model: &FloatModel, windows: &[FrameWindow]) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("evaluate needs windows"));
    }
    let predictions = windows.iter().map(|w| model.forward(&w.to_tensor())).collect::<Result<Vec<_>>>()?;
    let labels: Vec<ControlCommand> = windows.iter().map(|w| w.label).collect();
    let (steering_mse, throttle_mse) = mse_pair(&predictions, &labels)?;
    Ok(Evaluation { steering_mse, throttle_mse, predictions })
}

/// Adam with bias correction over every parameter of a [`FloatModel`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(model: &FloatModel, cfg: TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .param_layers()
            .iter()
            .flat_map(|(w, b)| [alloc::vec![0.0; w.len()], alloc::vec![0.0; b.len()]])
            .collect();
        Self { cfg, m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn step(&mut self, model: &mut FloatModel, grads: &ModelGradients) {
        self.steps += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, self.steps as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.steps as f64);
        let grad_bufs = grads
            .trunk
            .layers
            .iter()
            .chain(&grads.steering.layers)
            .chain(&grads.throttle.layers)
            .filter(|(w, _)| !w.is_empty())
            .flat_map(|(w, b)| [w, b]);
        let params = model.param_layers_mut().into_iter().flat_map(|(w, b)| [w, b]);
        for (((p, g), m), v) in params.zip(grad_bufs).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= c.learning_rate * m_hat / (math::sqrt(v_hat) + c.epsilon);
            }
        }
    }
}

/// Accumulates the gradient of the mean batch loss into `grads` and returns
/// the summed per-sample loss.
fn accumulate_batch(
    model: &FloatModel,
    batch: &[&FrameWindow],
    weights: LossWeights,
    grads: &mut ModelGradients,
    trace: &mut ForwardTrace,
) -> Result<f64> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for w in batch {
        let out = model.forward_traced(&w.to_tensor(), trace)?;
        let ds = out.steering - w.label.steering;
        let dt = out.throttle - w.label.throttle;
        total += weights.steering * ds * ds + weights.throttle * dt * dt;
        model.backward(trace, weights.steering * 2.0 * ds / n, weights.throttle * 2.0 * dt / n, grads, false)?;
    }
    Ok(total)
}

/// Trains a copy of `model` on `data.train` and reports per-epoch curves on
/// `data.test`.
pub fn train(model: &FloatModel, data: &SplitDataset, cfg: &TrainConfig) -> Result<(FloatModel, TrainReport)> {
    train_with_progress(model, data, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch (`epoch`, report so far).
pub fn train_with_progress<F: FnMut(usize, &TrainReport)>(
    model: &FloatModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<(FloatModel, TrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training split is empty"));
    }
    if data.test.is_empty() {
        return Err(Error::EmptyInput("test split is empty"));
    }
    let mut model = model.clone();
    let mut adam = Adam::new(&model, *cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut grads = ModelGradients::zeros_like(&model);
    let mut trace = ForwardTrace::default();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrameWindow> = chunk.iter().map(|&i| &data.train[i]).collect();
            grads.fill_zero();
            epoch_loss += accumulate_batch(&model, &batch, cfg.loss_weights, &mut grads, &mut trace)?;
            adam.step(&mut model, &grads);
        }
        report.train_loss.push(epoch_loss / data.train.len() as f64);
        let val = evaluate(&model, &data.test)?.metrics(cfg.loss_weights);
        report.val_loss.push(val.loss);
        report.val_steering_mse.push(val.steering_mse);
        report.val_throttle_mse.push(val.throttle_mse);
        progress(epoch, &report);
    }
    report.final_train = evaluate(&model, &data.train)?.metrics(cfg.loss_weights);
    model.meta.train_digest = cfg.digest();
    Ok((model, report))
}
