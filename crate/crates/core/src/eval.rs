//! Correlation metrics, distribution overlap and Grad-CAM maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{FloatModel, ForwardTrace, Head, INPUT_SIDE, LAST_CONV};
use crate::tensor::Tensor;

pub const BINNED_MEAN_BINS: usize = 20;
pub const DENSITY_BINS: usize = 50;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("correlation needs at least two points"));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::ZeroVariance("first series"));
    }
    if syy <= 0.0 {
        return Err(Error::ZeroVariance("second series"));
    }
    Ok((sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Inclusive value range of a head.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadRange {
    pub lo: f64,
    pub hi: f64,
}

impl HeadRange {
    pub const STEERING: Self = Self { lo: -1.0, hi: 1.0 };
    pub const THROTTLE: Self = Self { lo: 0.0, hi: 1.0 };

    pub fn for_head(head: Head) -> Self {
        match head {
            Head::Steering => Self::STEERING,
            Head::Throttle => Self::THROTTLE,
        }
    }

    /// Bin index of `v`; out-of-range values go to the edge bins.
    pub fn bin(&self, v: f64, bins: usize) -> usize {
        let t = (v - self.lo) / (self.hi - self.lo);
        let i = libm::floor(t * bins as f64);
        if !(i > 0.0) {
            0
        } else {
            (i as usize).min(bins - 1)
        }
    }

    pub fn bin_center(&self, i: usize, bins: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / bins as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BinnedMean {
    pub center: f64,
    /// Mean prediction of the samples whose ground truth fell in this bin;
    /// `None` for empty bins.
    pub mean_prediction: Option<f64>,
    pub count: usize,
}

/// Mean prediction per ground-truth bin.
pub fn binned_means(pred: &[f64], gt: &[f64], range: HeadRange, bins: usize) -> Result<Vec<BinnedMean>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gt.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("binned means"));
    }
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (&p, &g) in pred.iter().zip(gt) {
        let b = range.bin(g, bins);
        sums[b] += p;
        counts[b] += 1;
    }
    Ok((0..bins)
        .map(|i| BinnedMean {
            center: range.bin_center(i, bins),
            mean_prediction: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
            count: counts[i],
        })
        .collect())
}

/// Normalized histogram over `range`.
pub fn histogram(values: &[f64], range: HeadRange, bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram"));
    }
    let mut h = vec![0.0; bins];
    for &v in values {
        h[range.bin(v, bins)] += 1.0;
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistributionReport {
    pub prediction: Vec<f64>,
    pub ground_truth: Vec<f64>,
    /// `sum_i min(p_i, q_i)`.
    pub overlap: f64,
}

pub fn distribution_report(pred: &[f64], gt: &[f64], range: HeadRange, bins: usize) -> Result<DistributionReport> {
    let prediction = histogram(pred, range, bins)?;
    let ground_truth = histogram(gt, range, bins)?;
    let overlap = prediction.iter().zip(&ground_truth).map(|(a, b)| a.min(*b)).sum::<f64>().clamp(0.0, 1.0);
    Ok(DistributionReport { prediction, ground_truth, overlap })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadReport {
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub binned: Vec<BinnedMean>,
    pub distribution: DistributionReport,
}

/// Maps a zero-variance failure to `None`, keeping every other error.
pub fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ZeroVariance(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn head_report(pred: &[f64], gt: &[f64], range: HeadRange) -> Result<HeadReport> {
    Ok(HeadReport {
        pearson_r: defined(pearson(pred, gt))?,
        spearman_rho: defined(spearman(pred, gt))?,
        binned: binned_means(pred, gt, range, BINNED_MEAN_BINS)?,
        distribution: distribution_report(pred, gt, range, DENSITY_BINS)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub samples: usize,
    pub steering: HeadReport,
    pub throttle: HeadReport,
}

pub fn eval_report(pred: &[crate::ControlCommand], gt: &[crate::ControlCommand]) -> Result<EvalReport> {
    let ps: Vec<f64> = pred.iter().map(|c| c.steering).collect();
    let gs: Vec<f64> = gt.iter().map(|c| c.steering).collect();
    let pt: Vec<f64> = pred.iter().map(|c| c.throttle).collect();
    let gtt: Vec<f64> = gt.iter().map(|c| c.throttle).collect();
    Ok(EvalReport {
        samples: pred.len(),
        steering: head_report(&ps, &gs, HeadRange::STEERING)?,
        throttle: head_report(&pt, &gtt, HeadRange::THROTTLE)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradCamMap {
    pub head: Head,
    /// `ReLU(sum_k alpha_k A^k)` over the final conv grid, row-major.
    pub raw: Vec<f64>,
    pub raw_side: usize,
    /// Bilinear upsample to the input grid, max-normalized.
    pub upsampled: Vec<f64>,
    pub side: usize,
}

/// Grad-CAM at the final convolution for one head's pre-activation output.
/// Channel weights are the spatial means of the gradient at the conv's
/// pre-ReLU output; the map combines them with the post-ReLU activations.
pub fn gradcam(model: &FloatModel, window: &Tensor, head: Head) -> Result<GradCamMap> {
    let mut trace = ForwardTrace::default();
    model.forward_traced(window, &mut trace)?;
    let grads = model.head_logit_backward(&trace, head)?;
    let pre = LAST_CONV + 1;
    let grad = grads[pre].as_ref().ok_or(Error::NoTrace)?;
    let acts = &trace.trunk.values()[pre + 1];
    let dims = acts.dims();
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let positions = (h * w) as f64;
    let alpha: Vec<f64> = (0..c).map(|k| (0..h * w).map(|p| grad.data()[p * c + k]).sum::<f64>() / positions).collect();
    let raw: Vec<f64> = (0..h * w)
        .map(|p| {
            let v: f64 = (0..c).map(|k| alpha[k] * acts.data()[p * c + k]).sum();
            v.max(0.0)
        })
        .collect();
    let mut upsampled = bilinear_upsample(&raw, h, INPUT_SIDE);
    let max = upsampled.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        upsampled.iter_mut().for_each(|v| *v /= max);
    }
    Ok(GradCamMap { head, raw, raw_side: h, upsampled, side: INPUT_SIDE })
}

/// Half-pixel-centre bilinear resize of a square map.
pub fn bilinear_upsample(src: &[f64], side: usize, out_side: usize) -> Vec<f64> {
    let scale = side as f64 / out_side as f64;
    let coord = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_side * out_side);
    for oy in 0..out_side {
        let (y0, y1, fy) = coord(oy);
        for ox in 0..out_side {
            let (x0, x1, fx) = coord(ox);
            let top = src[y0 * side + x0] * (1.0 - fx) + src[y0 * side + x1] * fx;
            let bottom = src[y1 * side + x0] * (1.0 - fx) + src[y1 * side + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Fraction of the map's mass in columns `[0, split)`.
pub fn left_mass_fraction(map: &GradCamMap, split: usize) -> Option<f64> {
    let total: f64 = map.upsampled.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let left: f64 = map.upsampled.iter().enumerate().filter(|(i, _)| i % map.side < split).map(|(_, v)| v).sum();
    Some(left / total)
}
